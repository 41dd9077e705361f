"""
Activation tensor files
=======================

Per-checkpoint activation matrices are assembled into one tensor, written
in a small self-describing binary format, and read back bit for bit.
Damaged files fail with a specific error.
"""

# %%
import tempfile
from pathlib import Path

import numpy as np

from morfi.tensor_store import TensorFormatError, import_checkpoint_dir, load_tensor, write_tensor

tmp = Path(tempfile.mkdtemp())
rng = np.random.default_rng(0)
for epoch in (5, 10, 20):
    for p in (0, 50, 100):
        rng.random((4, 16), dtype=np.float32).tofile(tmp / f"e{epoch}_p{p}.bin")
(tmp / "sample_ids.txt").write_text("\n".join(f"fact-{i}" for i in range(4)))

tensor = import_checkpoint_dir(tmp, n_latents=16)
print(tensor.shape, tensor.epoch_axis.tolist(), tensor.mixture_axis.tolist(), tensor.sample_ids)

# %%
write_tensor(tensor, tmp / "acts.bin")
print("round trip identical:", load_tensor(tmp / "acts.bin").equals(tensor))

# %%
raw = (tmp / "acts.bin").read_bytes()
for name, broken in [("magic", b"X" + raw[1:]), ("truncated", raw[:-3]), ("extra bytes", raw + b"\0")]:
    (tmp / "bad.bin").write_bytes(broken)
    try:
        load_tensor(tmp / "bad.bin")
    except TensorFormatError as exc:
        print(f"{name:>11}: {type(exc).__name__}: {exc}")
