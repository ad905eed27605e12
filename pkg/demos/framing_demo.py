"""Split a message into 64-byte frames, encrypt them, shuffle, and reassemble."""
import os
import random

from mimictun import framing

key = os.urandom(16)
message = b"meet at the usual place " * 10
frames = framing.segment(message, 64)
print(f"{len(message)} bytes -> {len(frames)} frames")
wire = [framing.encrypt_frame(f, key) for f in frames]
random.shuffle(wire)
back = framing.reassemble([framing.decrypt_frame(c, key) for c in wire], 64)
print("reassembled:", back == message)
print("largest message in one sequence space:", framing.max_payload(64), "bytes")
