"""How many covert bits fit in one datagram of the synthetic game profile."""
from mimictun import framing, synth
from mimictun.profile import capacity, theoretical_goodput

profile = synth.synchro_profile(seed=0)
for f in profile.encoded_fields:
    t = profile.tables[f.name]
    print(f"{f.name:>6}: {t.count:4d} observed values -> {t.bits} bits")
s_bits, b_bits = capacity(profile)
print(f"S = {s_bits:.2f} bits, B = {b_bits} bits, chunk = {framing.chunk_size_for(profile)} bytes")
mean = profile.delay_corpus.mean
print(f"mean gap {mean * 1000:.2f} ms -> ceiling {theoretical_goodput(profile, mean):.0f} bps")
