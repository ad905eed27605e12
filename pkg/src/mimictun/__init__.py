"""Covert tunnel that mimics a captured UDP host protocol.

Modules: profile (capture ingestion, capacity), fte_codec (bits <-> host
datagrams), framing (segmentation, ECB frames), timing (deterministic HMM
pacing model), stats (KS and chi-square comparison), tunnel (endpoints),
sim (virtual-time harness), synth (synthetic fixtures), cli.
"""
__version__ = "0.1.0"
