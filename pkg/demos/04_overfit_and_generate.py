"""
Overfit a cube, then generate it back
=====================================

Trains the toy model on a single cube until the loss stays below a target,
then decodes a mesh from a freshly sampled point cloud and scores it.
A few minutes on one core.  Usage: ``python demos/04_overfit_and_generate.py [max_steps]``
"""

import sys
import tempfile

from lanemesh.engine import generate_mesh
from lanemesh.mesh import normalize, synth_shape
from lanemesh.metrics import evaluate
from lanemesh.model import TOY_CONFIG
from lanemesh.tokenizer import Scheme, tokenize
from lanemesh.train import RunConfig, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 400
run = RunConfig(model=TOY_CONFIG, steps=steps, lr_max=1e-3, lr_min=1e-5, target_loss=0.05, log_every=10)

with tempfile.TemporaryDirectory() as out:
    model, hist = train(run.build_examples(), run, out_dir=out)
for r in hist[:: max(1, len(hist) // 10)]:
    print(f"step {r['step']:4d}  loss {r['loss']:.4f}")
print(f"stopped after {len(hist)} steps, last loss {hist[-1]['loss']:.4f}")

# %% decode from a cloud the model has never seen
cube = normalize(synth_shape("cube", 1))
L = tokenize(cube, Scheme.HALFEDGE).true_length
gen = generate_mesh(model, cube, L, mode="adagraph", seed=123)
print("faces:", gen.mesh.n_faces, "partial:", gen.partial)
if gen.mesh.n_faces:
    print(evaluate(gen.mesh, cube, n=5000).to_dict())
