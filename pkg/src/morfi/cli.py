"""Command-line entry point: ``morfi <command> ...``.

Exit codes: 0 ok, 2 invalid input, 3 oracle failure, 4 internal invariant
violation. Seeds come from ``--seed`` or the ``SEED`` environment variable;
``--threads`` (or ``THREADS``) caps parallelism without changing outputs.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .core import (
    MorfiConfig,
    identify_monotonic_latents,
    ranked_to_csv,
    ranked_to_json,
    read_ranked_csv,
    select_control_group,
)
from .errors import InvariantViolation, MorfiError, OracleError, ValidationError
from .knowledge import (
    ExternalSampler,
    LookupSampler,
    MixtureSpec,
    QARecord,
    annotate,
    build_mixture,
    read_jsonl,
    recovery_report,
)
from .steering import DEFAULT_GRID, ALPHA_INIT, ExternalOracle, find_impactful_latents
from .synth import CausalOracleConfig, PlantConfig, generate_planted_tensor, make_causal_oracle, random_dictionary
from .tensor_store import load_tensor, write_tensor


EXIT_OK, EXIT_INPUT, EXIT_ORACLE, EXIT_INVARIANT = 0, 2, 3, 4


# ---------------------------------------------------------------- helpers


def _env_int(name: str) -> int | None:
    raw = os.environ.get(name)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise ValidationError(f"environment variable {name}={raw!r} is not an integer") from exc


def _load_config(path) -> dict:
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ValidationError(f"config {path} must hold a JSON object")
    return cfg


def _pick(flag, config: dict, key: str, default):
    """flag > config > default."""
    if flag is not None:
        return flag
    return config.get(key, default)


def _seed(args, config: dict) -> int:
    if args.seed is not None:
        return args.seed
    env = _env_int("SEED")
    if env is not None:
        return env
    return int(config.get("seed", 0))


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    return max(1, _env_int("THREADS") or 1)


def _write_manifest(path: Path, command: str, config: dict, seeds: dict, inputs: dict, outputs: dict, started: float):
    manifest = {
        "schema_version": 1,
        "command": command,
        "config": config,
        "seeds": seeds,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "version": __version__,
        "started_at": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "duration_s": round(time.time() - started, 6),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _manifest_path(out: Path) -> Path:
    return out.with_name(out.stem + ".manifest.json")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _parse_grid(text):
    if text is None:
        return None
    if isinstance(text, (list, tuple)):
        return [float(g) for g in text]
    if ":" in text:
        start, stop, step = (float(x) for x in text.split(":"))
        n = int(round((stop - start) / step)) + 1
        return [round(start + i * step, 10) for i in range(n)]
    return [float(g) for g in text.split(",") if g.strip()]


# ---------------------------------------------------------------- commands


def _sampler_from_config(cfg: dict):
    kind = cfg.get("type")
    if kind == "lookup":
        return LookupSampler(cfg.get("greedy", {}), cfg.get("sampled", {}))
    if kind == "external":
        return ExternalSampler(cfg["command"])
    raise ValidationError(f"unknown answer oracle type {kind!r}; expected 'lookup' or 'external'")


def cmd_annotate(args) -> int:
    started = time.time()
    seed = _seed(args, {})
    records, raw = [], []
    for line_no, obj in read_jsonl(args.dataset):
        try:
            records.append(QARecord.from_json(obj))
        except ValidationError as exc:
            raise ValidationError(f"{args.dataset}:{line_no}: {exc}") from exc
        raw.append(obj)
    sampler = _sampler_from_config(_load_config(args.oracle))
    kw = dict(n_ex=args.n_ex, k=args.k, n_sampled=args.n_sampled, seed=seed)
    lines = []
    try:
        for rec, obj in zip(records, raw):
            ann = annotate(rec, sampler, records, **kw)
            lines.append(json.dumps({**obj, "p_greedy": ann.p_greedy, "p_sampled": ann.p_sampled,
                                     "category": ann.category.value, "label": ann.label}, sort_keys=True))
    finally:
        if hasattr(sampler, "close"):
            sampler.close()
    out = Path(args.out)
    out.write_text("".join(l + "\n" for l in lines), encoding="utf-8")
    _write_manifest(_manifest_path(out), "annotate", kw, {"seed": seed}, {"dataset": args.dataset, "oracle": args.oracle},
                    {"annotated": out}, started)
    print(f"annotated {len(lines)} records -> {out}")
    return EXIT_OK


def cmd_mixture(args) -> int:
    started = time.time()
    seed = _seed(args, {})
    known, unknown = [], []
    for line_no, obj in read_jsonl(args.annotated):
        if "category" not in obj:
            raise ValidationError(f"{args.annotated}:{line_no}: record has no 'category' (run annotate first)")
        (unknown if obj["category"] == "Unknown" else known).append(obj)
    spec = MixtureSpec(args.p, args.size, seed)
    mix = build_mixture(known, unknown, spec)
    out = Path(args.out)
    out.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in mix), encoding="utf-8")
    _write_manifest(_manifest_path(out), "mixture", {"p": args.p, "size": args.size}, {"seed": seed},
                    {"annotated": args.annotated}, {"mixture": out}, started)
    print(f"D_{args.p}: {spec.n_unknown} Unknown + {args.size - spec.n_unknown} Known -> {out}")
    return EXIT_OK


def _morfi_config(args, config: dict) -> MorfiConfig:
    return MorfiConfig(
        aggregation_axis=_pick(args.axis, config, "aggregation_axis", "epochs"),
        replicates=int(_pick(getattr(args, "replicates", None), config, "replicates", 1000)),
        top_k=int(_pick(getattr(args, "top_k", None), config, "top_k", 1000)),
        alpha_sig=float(_pick(args.alpha_sig, config, "alpha_sig", 0.05)),
        seed=_seed(args, config),
    )


def cmd_analyze(args) -> int:
    started = time.time()
    config = _load_config(args.config)
    tensor_path = _pick(args.tensor, config, "tensor", None)
    if tensor_path is None:
        raise ValidationError("no tensor given (use --tensor or 'tensor' in the config)")
    cfg = _morfi_config(args, config)
    tensor = load_tensor(tensor_path)
    up, down = identify_monotonic_latents(tensor, cfg, threads=_threads(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ranked.csv").write_text(ranked_to_csv(up, down), encoding="utf-8")
    (out / "ranked.json").write_text(ranked_to_json(up, down) + "\n", encoding="utf-8")
    _write_manifest(out / "manifest.json", "analyze", vars(cfg), {"seed": cfg.seed}, {"tensor": tensor_path},
                    {"csv": out / "ranked.csv", "json": out / "ranked.json"}, started)
    print(f"increasing: {len(up)} latents, decreasing: {len(down)} latents -> {out}")
    return EXIT_OK


def cmd_control(args) -> int:
    started = time.time()
    config = _load_config(args.config)
    cfg = _morfi_config(args, config)
    n = int(_pick(args.n, config, "n_control", 10))
    tensor_path = _pick(args.tensor, config, "tensor", None)
    if tensor_path is None:
        raise ValidationError("no tensor given (use --tensor or 'tensor' in the config)")
    control = select_control_group(load_tensor(tensor_path), cfg, n)
    out = Path(args.out)
    out.write_text(_dump({"schema_version": 1, "control": control, "n_control": n,
                          "aggregation_axis": cfg.aggregation_axis, "alpha_sig": cfg.alpha_sig}), encoding="utf-8")
    _write_manifest(_manifest_path(out), "control", {**vars(cfg), "n_control": n}, {"seed": cfg.seed},
                    {"tensor": tensor_path}, {"control": out}, started)
    print(f"control group {control} -> {out}")
    return EXIT_OK


def _read_candidates(path, direction: str | None) -> list[int]:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"candidate file {path} does not exist")
    text = p.read_text(encoding="utf-8")
    if p.suffix == ".csv":
        return read_ranked_csv(p, direction)
    if p.suffix == ".json":
        obj = json.loads(text)
        if isinstance(obj, dict):
            lists = obj.get("lists", {})
            if direction is None:
                raise ValidationError("a ranked JSON holds two lists; pass --direction")
            return [int(r["latent"]) for r in lists.get(direction, [])]
        return [int(k) for k in obj]
    return [int(t) for t in text.split()]


def _model_oracle(cfg: dict):
    kind = cfg.get("type")
    if kind == "synthetic":
        dictionary = random_dictionary(int(cfg.get("n_latents", 2048)), int(cfg.get("d_model", 64)),
                                       int(cfg.get("dictionary_seed", 0)))
        causal = dict(cfg.get("causal", {}))
        return make_causal_oracle(CausalOracleConfig.from_dict(causal), dictionary), dictionary
    if kind == "external":
        return ExternalOracle(cfg["command"]), None
    raise ValidationError(f"unknown model oracle type {kind!r}; expected 'synthetic' or 'external'")


def cmd_steer(args) -> int:
    started = time.time()
    config = _load_config(args.config)
    cand_path = _pick(args.candidates, config, "candidates", None)
    if cand_path is None:
        raise ValidationError("no candidates given (use --candidates or 'candidates' in the config)")
    direction = _pick(args.direction, config, "direction", None)
    candidates = _read_candidates(cand_path, direction)
    if not candidates:
        raise ValidationError(f"candidate list {cand_path} is empty")
    polarity = int(_pick(args.polarity, config, "polarity", 1))
    grid = _parse_grid(_pick(args.grid, config, "grid", None)) or list(DEFAULT_GRID)
    alpha_init = float(_pick(args.alpha_init, config, "alpha_init", ALPHA_INIT))
    scale = float(_pick(args.layer_scale, config, "layer_scale", 1.0))
    oracle_cfg = _pick(args.oracle, config, "oracle", None)
    if oracle_cfg is None:
        raise ValidationError("no oracle given (use --oracle or 'oracle' in the config)")
    if isinstance(oracle_cfg, str):
        oracle_cfg = _load_config(oracle_cfg)
    seed = _seed(args, config)
    oracle, dictionary = _model_oracle(oracle_cfg)
    try:
        result = find_impactful_latents(candidates, polarity, oracle, dictionary, scale=scale, alpha_init=alpha_init,
                                        grid=grid, threads=_threads(args))
    finally:
        if hasattr(oracle, "close"):
            oracle.close()
    out = Path(args.out)
    out.write_text(_dump(result.to_dict()), encoding="utf-8")
    resolved = {"candidates": str(cand_path), "direction": direction, "polarity": polarity, "grid": grid,
                "alpha_init": alpha_init, "layer_scale": scale, "oracle": oracle_cfg}
    _write_manifest(_manifest_path(out), "steer", resolved, {"seed": seed}, {"candidates": cand_path},
                    {"result": out}, started)
    top = result.entries[0] if result.entries else None
    print(f"{len(result.entries)} latents ranked (top: {top}); {result.oracle_calls} oracle calls -> {out}")
    return EXIT_OK


def _read_correctness(path) -> dict[str, int]:
    out = {}
    for line_no, obj in read_jsonl(path):
        if "id" not in obj or "correct" not in obj:
            raise ValidationError(f"{path}:{line_no}: expected fields 'id' and 'correct'")
        out[str(obj["id"])] = int(bool(obj["correct"]))
    return out


def cmd_recover(args) -> int:
    started = time.time()
    d0, d100, d100s = (_read_correctness(p) for p in (args.d0, args.d100, args.d100s))
    ids = sorted(d0)
    if set(d100) != set(ids) or set(d100s) != set(ids):
        raise ValidationError("correctness files must cover the same evaluation ids")
    relations = None
    if args.relations:
        rel_map = {}
        for line_no, obj in read_jsonl(args.relations):
            if "id" not in obj or "relation" not in obj:
                raise ValidationError(f"{args.relations}:{line_no}: expected fields 'id' and 'relation'")
            rel_map[str(obj["id"])] = str(obj["relation"])
        missing = [i for i in ids if i not in rel_map]
        if missing:
            raise ValidationError(f"no relation tag for ids {missing[:5]}")
        relations = [rel_map[i] for i in ids]
    report = recovery_report([d0[i] for i in ids], [d100[i] for i in ids], [d100s[i] for i in ids], relations,
                             min_pool=args.min_pool, min_gains=args.min_gains)
    out = Path(args.out)
    out.write_text(_dump(report.to_dict()), encoding="utf-8")
    csv_path = out.with_suffix(".csv")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["relation", "r_k", "gains", "pool"])
    w.writerow(["ALL", "undefined" if report.r_k is None else repr(report.r_k), report.gross_gains, len(ids)])
    for r in report.per_relation:
        w.writerow([r.relation, repr(r.r_k), r.gains, r.pool])
    csv_path.write_text(buf.getvalue(), encoding="utf-8")
    _write_manifest(_manifest_path(out), "recover", {"min_pool": args.min_pool, "min_gains": args.min_gains}, {},
                    {"d0": args.d0, "d100": args.d100, "d100s": args.d100s, "relations": args.relations},
                    {"json": out, "csv": csv_path}, started)
    shown = "undefined" if report.r_k is None else f"{report.r_k:.4f}"
    print(f"R_K = {shown} over {report.gross_gains} gross gains -> {out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    started = time.time()
    config = _load_config(args.config)
    seed = _seed(args, config)
    config = {**config, "seed": seed}
    cfg = PlantConfig.from_dict(config)
    tensor, truth = generate_planted_tensor(cfg)
    out = Path(args.out)
    write_tensor(tensor, out)
    truth_path = out.with_name(out.stem + ".truth.json")
    truth_path.write_text(_dump(truth), encoding="utf-8")
    _write_manifest(_manifest_path(out), "synth", config, {"seed": seed}, {"config": args.config},
                    {"tensor": out, "truth": truth_path}, started)
    print(f"tensor {tensor.shape} -> {out}; truth -> {truth_path}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="morfi", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, threads=False):
        sp.add_argument("--seed", type=int, default=None, help="random seed (default: $SEED, then config, then 0)")
        if threads:
            sp.add_argument("--threads", type=int, default=None, help="worker threads (default: $THREADS or 1)")

    sp = sub.add_parser("annotate", help="estimate P_Correct and knowledge categories for QA records")
    sp.add_argument("--dataset", required=True, help="JSONL records {id, question, answer, relation, aliases?}")
    sp.add_argument("--oracle", required=True, help="answer-oracle config JSON (type 'lookup' or 'external')")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-ex", type=int, default=10)
    sp.add_argument("--k", type=int, default=4)
    sp.add_argument("--n-sampled", type=int, default=16)
    common(sp)
    sp.set_defaults(func=cmd_annotate)

    sp = sub.add_parser("mixture", help="build a fine-tuning set with exactly p%% Unknown records")
    sp.add_argument("--annotated", required=True)
    sp.add_argument("--p", type=int, required=True)
    sp.add_argument("--size", type=int, required=True)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_mixture)

    for name, func, help_ in (("analyze", cmd_analyze, "rank monotonically trending latents"),
                              ("control", cmd_control, "select non-trending control latents")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--tensor", default=None)
        sp.add_argument("--axis", choices=("epochs", "mixtures"), default=None,
                        help="aggregation axis; trends are tested along the other one (default epochs)")
        sp.add_argument("--alpha-sig", type=float, default=None)
        sp.add_argument("--config", default=None)
        sp.add_argument("--out", required=True)
        if name == "analyze":
            sp.add_argument("--replicates", type=int, default=None)
            sp.add_argument("--top-k", type=int, default=None)
            common(sp, threads=True)
        else:
            sp.add_argument("--n", type=int, default=None)
            common(sp)
        sp.set_defaults(func=func)

    sp = sub.add_parser("steer", help="screen and tune candidate latents by steering")
    sp.add_argument("--candidates", default=None, help="ranked.csv / JSON list / whitespace-separated indices")
    sp.add_argument("--direction", choices=("increasing", "decreasing"), default=None)
    sp.add_argument("--polarity", type=int, choices=(-1, 1), default=None)
    sp.add_argument("--oracle", default=None, help="model-oracle config JSON (type 'synthetic' or 'external')")
    sp.add_argument("--grid", default=None, help="'0.05,0.10,...' or 'start:stop:step'")
    sp.add_argument("--alpha-init", type=float, default=None)
    sp.add_argument("--layer-scale", type=float, default=None)
    sp.add_argument("--config", default=None)
    sp.add_argument("--out", required=True)
    common(sp, threads=True)
    sp.set_defaults(func=cmd_steer)

    sp = sub.add_parser("recover", help="knowledge-recovery rate and per-relation attribution")
    sp.add_argument("--d0", required=True)
    sp.add_argument("--d100", required=True)
    sp.add_argument("--d100s", required=True)
    sp.add_argument("--relations", default=None, help="JSONL {id, relation}")
    sp.add_argument("--min-pool", type=int, default=50)
    sp.add_argument("--min-gains", type=int, default=10)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_recover)

    sp = sub.add_parser("synth", help="generate a planted-trend tensor and its ground truth")
    sp.add_argument("--config", default=None, help="plant config JSON")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except OracleError as exc:
        print(f"morfi {args.command}: oracle failure: {exc}", file=sys.stderr)
        return EXIT_ORACLE
    except InvariantViolation as exc:
        print(f"morfi {args.command}: internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ValidationError, MorfiError, KeyError, TypeError, ValueError, OSError) as exc:
        print(f"morfi {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
