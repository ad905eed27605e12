"""Two endpoints on a simulated link with 10% loss, moving 20 KB in virtual time."""
import os

from mimictun import synth, timing
from mimictun.sim import Link, simulate, transfer_done
from mimictun.tunnel import Endpoint, format_status

profile = synth.synchro_profile(seed=0)
model = timing.fit(profile.delay_corpus.delays)
a, b = Endpoint(profile, model, seed=1), Endpoint(profile, model, seed=2)
data = os.urandom(20_000)
a.submit(data)
res = simulate(a, b, until=600, ab=Link(0.1, seed=5), ba=Link(0.1, seed=6), stop_when=transfer_done(a, len(data)))
print(f"delivered intact: {res.delivered[1] == data} after {res.end_time:.1f} virtual seconds")
print(format_status(a.status()))
