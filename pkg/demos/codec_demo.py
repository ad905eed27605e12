"""Hide 64 bytes inside a datagram that looks like captured game traffic, then get them back."""
import os

from mimictun import synth
from mimictun.fte_codec import decode_bytes, encode_bytes, validate_syntax

profile = synth.synchro_profile(seed=0)
secret = os.urandom(64)
datagram = encode_bytes(profile, secret)
print("datagram", datagram.hex())
print("looks like host traffic:", validate_syntax(profile, datagram))
print("recovered:", decode_bytes(profile, datagram, 64) == secret)

# flipping one byte breaks the checksum, so the receiver treats it as foreign
bad = bytearray(datagram)
bad[5] ^= 0x01
print("tampered still valid:", validate_syntax(profile, bytes(bad)))
