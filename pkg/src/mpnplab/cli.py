"""Command-line entry point: data generation, training phases, evaluation, cost reports.

Every command writes its outputs plus a ``manifest.json`` (the run manifest)
into ``--out``.  Configuration comes from an INI-style key = value file whose
sections name the dataclass being configured::

    [transformer]        TransformerConfig fields
    [camera] / [range]   EncoderConfig fields
    [regime]             RegimeConfig fields
    [system]             scalar SystemConfig fields (n_connect, lora_rank, ...)
    [pretrain] [offline] [runtime] [baseline]   TrainConfig fields
    [data]               generate_dataset keywords (num_scenes, ...)
    [pipeline]           pretrain_scenes

Flags override the file.  Failures print one JSON line to stderr and exit
with a code from ``EXIT_CODES``.
"""

from __future__ import annotations

import argparse
import ast
import configparser
import csv
import json
import subprocess
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

from . import __version__
from . import adaptation as ad
from . import costmodel as cm
from . import synthdata as sd
from . import tensorcore as tc
from .checkpoint import CheckpointError

EXIT_CODES = {
    "error": 1,
    "usage": 2,
    "malformed_config": 3,
    "missing_checkpoint": 4,
    "infeasible_budget": 5,
    "missing_data": 6,
    "bad_checkpoint": 7,
}

COMMANDS = ("gen-data", "train-offline", "adapt", "eval", "cost-report", "baseline", "ablate",
            "sweep-n")
# commands that draw random numbers and therefore insist on --seed
SEEDED = {"gen-data", "train-offline", "adapt", "cost-report", "baseline", "ablate", "sweep-n"}

TRAIN_SECTIONS = ("pretrain", "offline", "runtime", "baseline")


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


# --- configuration ---------------------------------------------------------------

def _value(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _apply(obj, section: str, items: dict):
    names = {f.name for f in fields(obj)}
    unknown = sorted(set(items) - names)
    if unknown:
        raise CliError("malformed_config", f"[{section}] unknown keys {unknown}")
    try:
        return replace(obj, **items)
    except (TypeError, ValueError) as e:
        raise CliError("malformed_config", f"[{section}] {e}") from None


def load_config(path: str | None) -> dict:
    """Parse the key = value file into ``{section: {key: value}}``."""
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CliError("malformed_config", f"config file {path} not found")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(p.read_text(encoding="utf-8"), source=str(p))
    except configparser.Error as e:
        raise CliError("malformed_config", str(e).replace("\n", " ")) from None
    known = {"transformer", "camera", "range", "regime", "system", "data", "pipeline",
             *TRAIN_SECTIONS}
    out = {}
    for sec in parser.sections():
        if sec not in known:
            raise CliError("malformed_config", f"unknown section [{sec}]")
        out[sec] = {k: _value(v) for k, v in parser.items(sec)}
    return out


def build_pipeline_config(raw: dict, seed: int | None = None, n: int | None = None
                          ) -> tuple[ad.PipelineConfig, ad.TrainConfig]:
    """Pipeline config and the baseline's TrainConfig, file values then flag overrides."""
    pcfg = ad.PipelineConfig()
    scfg = pcfg.system
    sub = {"transformer": scfg.transformer, "camera": scfg.camera, "range": scfg.range,
           "regime": scfg.regime}
    updates = {k: _apply(v, k, raw.get(k, {})) for k, v in sub.items()}
    scalar = dict(raw.get("system", {}))
    if any(k in sub for k in scalar):
        raise CliError("malformed_config", "[system] nested configs go in their own section")
    if seed is not None:
        scalar["seed"] = seed
    if n is not None:
        scalar["n_connect"] = n
    scfg = _apply(replace(scfg, **updates), "system", scalar)
    if not 1 <= scfg.n_connect <= scfg.transformer.num_blocks:
        raise CliError("malformed_config",
                       f"n_connect {scfg.n_connect} outside [1, {scfg.transformer.num_blocks}]")
    trains = {}
    for sec in TRAIN_SECTIONS:
        base = getattr(pcfg, sec) if sec != "baseline" else replace(pcfg.runtime, phase="baseline")
        items = dict(raw.get(sec, {}))
        if seed is not None:
            items.setdefault("seed", seed)
        trains[sec] = _apply(base, sec, items)
    pipe = _apply(pcfg, "pipeline", raw.get("pipeline", {}))
    return replace(pipe, system=scfg, pretrain=trains["pretrain"], offline=trains["offline"],
                   runtime=trains["runtime"]), trains["baseline"]


def _snapshot(pcfg: ad.PipelineConfig, baseline: ad.TrainConfig, raw: dict) -> dict:
    snap = asdict(pcfg)
    snap["baseline"] = asdict(baseline)
    snap["data"] = raw.get("data", {})
    return snap


# --- manifest and io ----------------------------------------------------------------

def build_id() -> str:
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"mpnplab-{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"mpnplab-{__version__}"


def write_manifest(out: Path, command: str, config: dict, seed, inputs: dict,
                   outputs: list[str], argv: list[str]) -> Path:
    manifest = {"command": command, "argv": argv, "seed": seed, "config": config,
                "inputs": inputs, "outputs": sorted(outputs), "build": build_id()}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _write_json(path: Path, obj) -> str:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path.name


def _jsonable(o):
    if hasattr(o, "item"):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _write_csv(path: Path, rows: list[dict]) -> str:
    cols: list[str] = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols, lineterminator="\n", restval="")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})
    return path.name


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return "" if v is None else v


def _result_json(res: ad.AdaptationResult) -> dict:
    d = res.to_json()
    d.pop("seconds", None)  # keep primary outputs reproducible byte for byte
    d.pop("checkpoint", None)
    d["accuracy_exists_count_side"] = ad.EvalResult(
        res.accuracy_after, res.per_qtype_after, 0).subset_accuracy(ad.EVAL_QTYPES)
    d["trainable_fraction"] = res.trainable_fraction
    return d


def _dataset(args, raw: dict, seed: int | None) -> tuple[sd.Dataset, dict]:
    if args.data:
        d = Path(args.data)
        if not (d / "dataset_manifest.json").is_file():
            raise CliError("missing_data", f"no dataset manifest under {d}")
        ds = sd.Dataset.load(d)
        return ds, {"data": str(d), "data_hashes": ds.manifest()["hashes"]}
    kw = dict(raw.get("data", {}))
    kw["seed"] = kw.get("seed", seed if seed is not None else 0)
    try:
        ds = sd.generate_dataset(**kw)
    except (TypeError, ValueError) as e:
        raise CliError("malformed_config", f"[data] {e}") from None
    return ds, {"data": "generated", "data_hashes": ds.manifest()["hashes"]}


def _load_system(path: str | None) -> ad.MPnPSystem:
    if not path:
        raise CliError("missing_checkpoint", "--checkpoint is required")
    if not Path(path).is_file():
        raise CliError("missing_checkpoint", f"checkpoint {path} not found")
    try:
        return ad.MPnPSystem.load(path)
    except CheckpointError as e:
        raise CliError("bad_checkpoint", str(e)) from None


def _modalities(text: str | None, default: tuple) -> tuple:
    if not text:
        return default
    mods = tuple(m.strip() for m in text.split(",") if m.strip())
    bad = [m for m in mods if m not in ("camera", "range")]
    if bad or not mods:
        raise CliError("usage", f"unknown modalities {bad or text!r}")
    return mods


def _ns(text: str | None) -> list[int] | None:
    if text is None:
        return None
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise CliError("usage", f"--n expects integers, got {text!r}") from None


# --- commands ---------------------------------------------------------------------

def cmd_gen_data(args, pcfg, raw, out):
    ds, _ = _dataset(argparse.Namespace(data=None), raw, args.seed)
    ds.save(out)
    return {}, [f"{k}.jsonl" for k in ds.splits] + ["dataset_manifest.json"]


def cmd_train_offline(args, pcfg, raw, out):
    ds, inputs = _dataset(args, raw, args.seed)
    mods = _modalities(args.modalities, pcfg.offline_modalities)
    if args.ablate not in (None, "linear_aligner", "fixed_gates", "no_offline_kv"):
        raise CliError("usage", f"--ablate {args.ablate} does not apply to train-offline")
    pcfg = replace(pcfg, offline_modalities=mods)
    log = out / "metrics.jsonl"
    log.unlink(missing_ok=True)
    system, res = ad.offline_system(pcfg, ds, None, args.ablate,
                                    checkpoint_path=out / "offline.ckpt", log_path=log)
    _write_json(out / "result.json", _result_json(res))
    return inputs, ["offline.ckpt", "metrics.jsonl", "result.json"]


def cmd_adapt(args, pcfg, raw, out):
    system = _load_system(args.checkpoint)
    ds, inputs = _dataset(args, raw, args.seed)
    mods = _modalities(args.modalities, pcfg.runtime_modalities)
    keep = _modalities(args.keep, ()) if args.keep else ()
    if args.ablate not in (None, "no_lora", "linear_aligner"):
        raise CliError("usage", f"--ablate {args.ablate} does not apply to adapt")
    ns = _ns(args.n)
    log = out / "metrics.jsonl"
    log.unlink(missing_ok=True)
    res = ad.runtime_adapt(system, ds, mods, pcfg.runtime, n=ns[0] if ns else None, keep=keep,
                           lora=args.ablate != "no_lora",
                           aligner_kind="linear" if args.ablate == "linear_aligner" else None,
                           checkpoint_path=out / "runtime.ckpt", log_path=log)
    _write_json(out / "result.json", _result_json(res))
    inputs["checkpoint"] = args.checkpoint
    return inputs, ["runtime.ckpt", "metrics.jsonl", "result.json"]


def cmd_eval(args, pcfg, raw, out):
    system = _load_system(args.checkpoint)
    ds, inputs = _dataset(args, raw, args.seed)
    if args.split not in ds.splits:
        raise CliError("usage", f"unknown split {args.split!r}")
    res = ad.exact_match_eval(system, ds[args.split], ds.seed, use_lora=system.config.lora)
    body = {"split": args.split, "modalities": list(system.active), "N": system.N,
            "accuracy": res.accuracy, "n": res.n,
            "accuracy_exists_count_side": res.subset_accuracy(ad.EVAL_QTYPES),
            "per_qtype": {k: {"accuracy": a, "n": c} for k, (a, c) in res.per_qtype.items()}}
    name = _write_json(out / f"eval_{args.split}.json", body)
    inputs["checkpoint"] = args.checkpoint
    return inputs, [name]


def _probe_system(pcfg, modalities):
    system = ad.MPnPSystem(pcfg.system)
    system.mount(pcfg.offline_modalities, fresh=pcfg.offline_modalities)
    system.mount(modalities, fresh=modalities)
    return system


def cmd_cost_report(args, pcfg, raw, out):
    if args.l is not None:
        pcfg = replace(pcfg, system=replace(pcfg.system, transformer=replace(
            pcfg.system.transformer, num_blocks=args.l), n_connect=min(
            pcfg.system.n_connect, args.l)))
    L = pcfg.system.transformer.num_blocks
    ns = _ns(args.n) or list(range(1, L + 1))
    if any(not 1 <= n <= L for n in ns):
        raise CliError("usage", f"--n values must lie in [1, {L}]")
    ds, inputs = _dataset(args, raw, args.seed)
    mods = _modalities(args.modalities, pcfg.runtime_modalities)
    system = _probe_system(pcfg, mods)
    batch = ad.probe_batch(ds["night-train"])
    names = lambda: system.runtime_trainables(mods)
    system.set_n(L)
    reference = ad.measure_step(system, batch, names(), ds.seed)
    reports = []
    for n in ns:
        system.set_n(n)
        measured = ad.measure_step(system, batch, names(), ds.seed)
        reports.append(cm.reconcile(measured, cm.calibrate(reference, L, n)))
    cm.reports_to_csv(reports, out / "cost_report.csv")
    outputs = ["cost_report.csv"]
    if args.budget is not None:
        chosen = cm.choose_n(args.budget, cm.calibrate(reference, L, 1))
        _write_json(out / "budget.json", {"budget": args.budget, "L": L, "N": chosen})
        outputs.append("budget.json")
    return inputs, outputs


def cmd_baseline(args, pcfg, baseline_cfg, raw, out):
    system = _load_system(args.checkpoint)
    ds, inputs = _dataset(args, raw, args.seed)
    mods = _modalities(args.modalities, pcfg.runtime_modalities)
    variants = ("prompt-tune", "full-finetune") if args.variant == "both" else (args.variant,)
    rows = []
    batch = ad.probe_batch(ds["night-train"])
    cmp = ad.block_dy_comparison(system, batch, mods, data_seed=ds.seed)
    for v in variants:
        res = ad.baseline_input_layer(system, ds, baseline_cfg, v, mods)
        rows.append({"variant": v, "night_acc": res.accuracy_after,
                     "night_acc_exists_count_side": ad.EvalResult(
                         0, res.per_qtype_after, 0).subset_accuracy(ad.EVAL_QTYPES),
                     "trainable_params": res.trainable_params, "total_params": res.total_params,
                     "steps": res.steps, "backward_dy": res.backward_dy,
                     "backward_dw": res.backward_dw})
    _write_csv(out / "baseline.csv", rows)
    _write_json(out / "block_dy.json", cmp)
    inputs["checkpoint"] = args.checkpoint
    return inputs, ["baseline.csv", "block_dy.json"]


def cmd_ablate(args, pcfg, raw, out):
    ds, inputs = _dataset(args, raw, args.seed)
    flags = (None, *ad.ABLATIONS) if args.ablate is None else (None, args.ablate)
    rows = ad.ablation_suite(pcfg, ds, flags)
    _write_csv(out / "ablation.csv", rows)
    return inputs, ["ablation.csv"]


def cmd_sweep_n(args, pcfg, raw, out):
    base = _load_system(args.checkpoint)
    L = base.L
    ns = _ns(args.n) or list(range(2, L + 1, 2))
    if any(not 1 <= n <= L for n in ns):
        raise CliError("usage", f"--n values must lie in [1, {L}]")
    ds, inputs = _dataset(args, raw, args.seed)
    mods = _modalities(args.modalities, pcfg.runtime_modalities)
    rows = []
    for n in ns:
        system = _load_system(args.checkpoint)
        res = ad.runtime_adapt(system, ds, mods, pcfg.runtime, n=n)
        rep = res.cost_report
        rows.append({"N": n, "L": L, "night_acc": res.accuracy_after,
                     "night_acc_exists_count_side": ad.EvalResult(
                         0, res.per_qtype_after, 0).subset_accuracy(ad.EVAL_QTYPES),
                     "measured_backprop_per_step": rep.measured_backprop,
                     "analytic_backprop_per_step": round(rep.analytic_backprop),
                     "train_backward_dy": res.backward_dy, "train_backward_dw": res.backward_dw,
                     "trainable_params": res.trainable_params})
    _write_csv(out / "sweep_n.csv", rows)
    inputs["checkpoint"] = args.checkpoint
    return inputs, ["sweep_n.csv"]


# --- entry point ----------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mpnplab", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="key = value config file")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", required=True)
        s.add_argument("--precision", type=int, choices=(32, 64), default=32)
        s.add_argument("--data", help="dataset directory from gen-data")
        if name not in ("gen-data", "ablate", "train-offline"):
            s.add_argument("--checkpoint")
        if name != "gen-data":
            s.add_argument("--modalities", help="comma-separated, e.g. range or camera,range")
            s.add_argument("--n", help="connected blocks (comma list for cost-report/sweep-n)")
        if name in ("train-offline", "adapt", "ablate"):
            s.add_argument("--ablate", choices=ad.ABLATIONS)
        if name == "adapt":
            s.add_argument("--keep", help="already-connected modalities to keep (frozen)")
        if name == "eval":
            s.add_argument("--split", default="night-test", choices=sd.SPLITS)
        if name == "cost-report":
            s.add_argument("--l", type=int, help="number of blocks L")
            s.add_argument("--budget", type=float, help="backward FLOPs budget per step")
        if name == "baseline":
            s.add_argument("--variant", default="both",
                           choices=("prompt-tune", "full-finetune", "both"))
    return p


def _fail(kind: str, message: str) -> int:
    code = EXIT_CODES[kind]
    print(json.dumps({"error": kind, "exit": code, "message": message}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = make_parser().parse_args(argv)
        if args.command in SEEDED and args.seed is None:
            raise CliError("usage", f"{args.command} requires an explicit --seed")
        raw = load_config(args.config)
        single_n = _ns(getattr(args, "n", None))
        n = single_n[0] if single_n and args.command in ("train-offline", "ablate") else None
        pcfg, baseline_cfg = build_pipeline_config(raw, args.seed, n)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with tc.precision(args.precision):
            if args.command == "baseline":
                inputs, outputs = cmd_baseline(args, pcfg, baseline_cfg, raw, out)
            else:
                handler = globals()["cmd_" + args.command.replace("-", "_")]
                inputs, outputs = handler(args, pcfg, raw, out)
        write_manifest(out, args.command, _snapshot(pcfg, baseline_cfg, raw), args.seed,
                       inputs, outputs, argv)
    except CliError as e:
        return _fail(e.kind, str(e))
    except cm.InfeasibleBudget as e:
        return _fail("infeasible_budget", str(e))
    except (ad.TrainingError, ad.FreezeViolation, ValueError) as e:
        return _fail("error", f"{type(e).__name__}: {e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
