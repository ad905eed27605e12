"""Compare generated gaps against a learned model, then a shifted copy that should fail."""
import numpy as np

from mimictun import stats, synth, timing
from mimictun.cli import comparison_text

model = timing.fit(synth.synchro_delays(20_000, seed=4))
gen = np.asarray(timing.generate_sequence(model, "b", 10_000, np.random.default_rng(1)))
print(comparison_text(stats.compare_models(model, gen, rng=0)))
print(comparison_text(stats.compare_models(model, gen + 0.004, rng=0)))
