"""Learn a delay model from a capture and sample a new gap sequence from it."""
import numpy as np

from mimictun import synth, timing

corpus = synth.synchro_delays(20_000, seed=3)
model = timing.fit(corpus)
print("states", model.bin_map.labels, "peaks (ms)", [round(p * 1000, 2) for p in model.bin_map.peaks])
print("boundaries (ms)", [round(b * 1000, 2) for b in model.bin_map.boundaries])
print("transitions\n", np.round(model.transitions, 3))
gaps = timing.generate_sequence(model, "b", 10, np.random.default_rng(0))
print("sampled gaps (ms)", [round(g * 1000, 2) for g in gaps])
