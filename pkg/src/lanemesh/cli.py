"""Command-line entry point: ``lanemesh <subcommand> [flags]``.

Every subcommand prints a JSON result on success.  Failures print
``{"error": <type>, "message": <text>}`` to stderr and exit with status 1.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .bench import throughput_bench
from .cost import crossover, sweep, write_sweep_csv
from .engine import generate_mesh, hardware_threads
from .mesh import Mesh, PointCloudSet, load_obj, make_pointcloud_set, normalize, save_obj, synth_shape
from .metrics import evaluate
from .model import MICRO_CONFIG, LaneModel, ModelConfig, subsequence_loss
from .tokenizer import Scheme, TokenSequence, detokenize, split_subsequences, tokenize
from .train import RunConfig, load_model, train


class CliError(Exception):
    pass


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such file: {p}")
    return p


def _run_config(args) -> RunConfig:
    run = RunConfig.load(_existing(args.config)) if getattr(args, "config", None) else RunConfig()
    return run


def _scheme(name: str) -> Scheme:
    return Scheme[name.upper()]


def _read_tokens(path: Path, scheme: Scheme | None) -> TokenSequence:
    data = path.read_bytes()
    if data[:8] == b"LANETOK1":
        return TokenSequence.from_bytes(data)
    return TokenSequence.from_text(data.decode(), scheme or Scheme.HALFEDGE)


def _load_input_mesh(path: str) -> Mesh:
    return normalize(load_obj(_existing(path)))


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> dict:
    mesh = normalize(synth_shape(args.kind, args.resolution, seed=args.seed, jitter=args.jitter))
    save_obj(mesh, args.out)
    return {"out": args.out, "vertices": mesh.n_vertices, "faces": mesh.n_faces}


def cmd_tokenize(args) -> dict:
    seq = tokenize(_load_input_mesh(args.input), _scheme(args.scheme))
    if args.text:
        Path(args.out).write_text(seq.to_text() + "\n")
    else:
        seq.save(args.out)
    return {"out": args.out, "length": seq.true_length, "scheme": seq.scheme.name.lower()}


def cmd_detokenize(args) -> dict:
    seq = _read_tokens(_existing(args.input), _scheme(args.scheme) if args.scheme else None)
    if args.best_effort:
        res = detokenize(seq, best_effort=True)
        save_obj(res.mesh, args.out)
        return {"out": args.out, "faces": res.mesh.n_faces, "partial": res.partial,
                "error": str(res.error) if res.error else None}
    mesh = detokenize(seq)
    save_obj(mesh, args.out)
    return {"out": args.out, "faces": mesh.n_faces, "partial": False}


def cmd_sample(args) -> dict:
    run = _run_config(args)
    pcs = make_pointcloud_set(_load_input_mesh(args.input), run.model.counts, args.seed)
    out = args.out if args.out.endswith(".npz") else args.out + ".npz"
    pcs.save(out)
    return {"out": out, "counts": list(pcs.counts), "seed": args.seed}


def cmd_train(args) -> dict:
    run = _run_config(args)
    if args.seed is not None:
        run = RunConfig.from_dict({**run.to_dict(), "seed": args.seed})
    examples = run.build_examples()
    model, hist = train(examples, run, out_dir=args.out, resume=args.resume)
    return {"out": args.out, "steps": len(hist), "final_loss": hist[-1]["loss"] if hist else None,
            "checkpoint": str(Path(args.out) / "checkpoint.bin"), "config_hash": model.config.hash()}


def _source(args, model: LaneModel):
    path = _existing(args.input)
    if path.suffix == ".npz":
        return PointCloudSet.load(path), None
    mesh = _load_input_mesh(args.input)
    return mesh, mesh


def _generate(args, corrupt: float | None) -> dict:
    run_cfg = RunConfig.load(_existing(args.config)).model if args.config else None
    model, _, _ = load_model(_existing(args.checkpoint), run_cfg)
    source, mesh = _source(args, model)
    scheme = _scheme(args.scheme)
    L = args.length
    if L is None:
        if mesh is None:
            raise CliError("--length is required for point-cloud input")
        L = tokenize(mesh, scheme).true_length
    out = generate_mesh(model, source, L, mode=args.mode, batch_limit=args.batch_limit, scheme=scheme,
                        seed=args.seed, corrupt_fraction=corrupt)
    stem = Path(args.out)
    stem.parent.mkdir(parents=True, exist_ok=True)
    save_obj(out.mesh, stem.with_suffix(".obj"))
    out.result.tokens.save(stem.with_suffix(".tok"))
    stem.with_suffix(".timing.json").write_text(json.dumps(out.result.timing_json(), indent=2))
    return {"mesh": str(stem.with_suffix(".obj")), "tokens": str(stem.with_suffix(".tok")),
            "faces": out.mesh.n_faces, "partial": out.partial,
            "error": str(out.decoded.error) if out.decoded.error else None, "timing": out.result.timing_json()}


def cmd_generate(args) -> dict:
    return _generate(args, None)


def cmd_repair(args) -> dict:
    if Path(args.input).suffix == ".npz":
        raise CliError("repair needs a mesh input")
    return _generate(args, args.corrupt_fraction)


def cmd_eval(args) -> dict:
    gen = load_obj(_existing(args.generated))
    ref = load_obj(_existing(args.reference))
    return evaluate(gen, ref, n=args.samples, seed=args.seed).to_dict()


def cmd_bench(args) -> dict:
    report: dict = {}
    cfg = RunConfig.load(_existing(args.config)).model if args.config else ModelConfig()
    if args.sweep_L:
        lengths = [int(x) for x in args.sweep_L.split(",")]
        big = max(lengths)
        if big > cfg.capacity:
            cfg = ModelConfig.from_dict({**cfg.to_dict(), "M_max": -(-big // cfg.l_sub)})
        rows = sweep(cfg, lengths)
        if args.out:
            write_sweep_csv(rows, args.out)
        report["sweep"] = [r.__dict__ | {"score_ratio": r.score_ratio} for r in rows]
        report["crossover_L"] = crossover(cfg, big)
    if args.length:
        model = load_model(_existing(args.checkpoint))[0] if args.checkpoint else LaneModel(cfg, seed=args.seed)
        if args.input:
            pcs = make_pointcloud_set(_load_input_mesh(args.input), model.config.counts, args.seed)
        else:
            pcs = make_pointcloud_set(normalize(synth_shape("cube", 1)), model.config.counts, args.seed)
        limits = [1, args.batch_limit or hardware_threads()]
        report["throughput"] = throughput_bench(model, pcs, args.length, sorted(set(limits)), repeats=args.repeats)
    if not report:
        raise CliError("nothing to do: pass --sweep-L and/or --length")
    return report


def cmd_gradcheck(args) -> dict:
    cfg = MICRO_CONFIG
    model = LaneModel(cfg, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    for n, t in model.params.items():
        if not t.data.any():  # zero-initialized: randomize so every path carries gradient
            t.data[...] = rng.standard_normal(t.shape) * 0.3
    mesh = normalize(synth_shape("cube", 1))
    seq = tokenize(mesh, Scheme.HALFEDGE)
    pcs = make_pointcloud_set(mesh, cfg.counts, args.seed)
    L = min(seq.true_length, cfg.capacity)
    subs = split_subsequences(TokenSequence(seq.real[:L], seq.scheme, L), cfg.l_sub)
    m = subs.M

    def loss(*_):
        return subsequence_loss(model.forward(pcs, L, m), subs.subsequences[m - 1])

    err = ad.gradcheck(loss, list(model.params.values()), max_elements=args.max_elements, seed=args.seed)
    return {"max_rel_error": err, "passed": err < 1e-4, "config": cfg.to_dict(), "pathway": m, "L": L}


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lanemesh", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("synth", cmd_synth, "write a normalized synthetic mesh as OBJ")
    sp.add_argument("--kind", required=True, choices=["cube", "uv_sphere", "torus", "grid"])
    sp.add_argument("--resolution", type=int, default=1)
    sp.add_argument("--jitter", type=float, default=0.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("tokenize", cmd_tokenize, "OBJ mesh to token file")
    sp.add_argument("input")
    sp.add_argument("--scheme", choices=["flat", "halfedge"], default="halfedge")
    sp.add_argument("--text", action="store_true", help="write whitespace-separated ids instead of binary")
    sp.add_argument("--out", required=True)

    sp = add("detokenize", cmd_detokenize, "token file to OBJ mesh")
    sp.add_argument("input")
    sp.add_argument("--scheme", choices=["flat", "halfedge"], default=None,
                    help="scheme of a text token file (binary files carry their own)")
    sp.add_argument("--best-effort", action="store_true", help="keep faces read before a grammar error")
    sp.add_argument("--out", required=True)

    sp = add("sample", cmd_sample, "sample the four point clouds of a mesh to .npz")
    sp.add_argument("input")
    sp.add_argument("--config", help="RunConfig JSON (point counts)")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "train on the RunConfig dataset; writes checkpoint.bin and metrics.jsonl")
    sp.add_argument("--config", help="RunConfig JSON")
    sp.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    sp.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.bin")
    sp.add_argument("--out", required=True)

    for name, fn, help_ in (("generate", cmd_generate, "generate a mesh from a mesh or point-cloud file"),
                            ("repair", cmd_repair, "corrupt a mesh, then regenerate it from its samples")):
        sp = add(name, fn, help_)
        sp.add_argument("input", help=".obj mesh or .npz point-cloud set")
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--config", help="RunConfig JSON whose model must match the checkpoint")
        sp.add_argument("--length", type=int, default=None, help="target sequence length L")
        sp.add_argument("--mode", choices=["serial", "adagraph"], default="adagraph")
        sp.add_argument("--batch-limit", type=int, default=None)
        sp.add_argument("--scheme", choices=["flat", "halfedge"], default="halfedge")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=True, help="output stem; writes .obj, .tok and .timing.json")
        if name == "repair":
            sp.add_argument("--corrupt-fraction", type=float, default=0.2)

    sp = add("eval", cmd_eval, "geometric metrics of a generated mesh against a reference")
    sp.add_argument("generated")
    sp.add_argument("reference")
    sp.add_argument("--samples", type=int, default=10_000)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("bench", cmd_bench, "FLOP sweep and/or decode throughput")
    sp.add_argument("--config", help="RunConfig JSON (model config)")
    sp.add_argument("--sweep-L", help="comma-separated lengths for the cost sweep")
    sp.add_argument("--out", help="CSV path for the sweep")
    sp.add_argument("--checkpoint")
    sp.add_argument("--input", help="mesh for the throughput fixture (default: cube)")
    sp.add_argument("--length", type=int, help="L for the throughput benchmark")
    sp.add_argument("--batch-limit", type=int, default=None)
    sp.add_argument("--repeats", type=int, default=5)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("gradcheck", cmd_gradcheck, "end-to-end gradient check on the micro config")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--max-elements", type=int, default=20)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _emit(args.fn(args))
    except Exception as e:  # noqa: BLE001 - every failure becomes a JSON error
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
