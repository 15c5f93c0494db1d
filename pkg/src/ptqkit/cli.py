"""Command line: synth, migrate, calibrate, eval, report and pipeline.

Exit codes: 0 success, 1 usage, 2 data/model error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np
import torch

from . import io
from . import metrics as M
from .calibration import METHODS, TIMING_HEADER, TRACE_HEADER, CalibrationResult, CalibrationSet, ClipSearchConfig, calibrate, quant_loss
from .errors import ConfigurationError, NumericalError, PTQError
from .migration import equivalence_report, migrate
from .model import ModelGraph, classify, forward, place_quant_nodes
from .synthetic import SynthConfig, synthesize

ALLOWED_BITS = (2, 4, 6, 8, 16, 30)
DEFAULTS = {
    "seed": 0,
    "method": "twc",
    "bits": "6-6-6",
    "migrate": False,
    "alpha_iters": 30,
    "lr": 1e-5,
    "epochs": 3,
    "percentile_ratio": 0.999,
    "omse_search": "grid",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def parse_bits(text: str) -> dict:
    parts = str(text).split("-")
    try:
        w, e, a = (int(p) for p in parts)
    except ValueError:
        raise UsageError(f"--bits must look like W-E-A (e.g. 6-6-6), got {text!r}") from None
    for b in (w, e, a):
        if b not in ALLOWED_BITS:
            raise UsageError(f"bit-width {b} not in {ALLOWED_BITS}")
    return {"weight": w, "embedding": e, "activation": a}


def _resolve(args) -> dict:
    """Flags override the JSON config file, which overrides defaults."""
    conf = io.read_json(args.config) if getattr(args, "config", None) else {}
    out = dict(DEFAULTS)
    out.update({k.replace("-", "_"): v for k, v in conf.items()})
    for k, v in vars(args).items():
        if v is not None:
            out[k] = v
    if out["method"] not in METHODS:
        raise UsageError(f"unknown method {out['method']!r}; choose from {', '.join(METHODS)}")
    return out


def _out(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _search_cfg(c: dict) -> ClipSearchConfig:
    return ClipSearchConfig(iterations=int(c["alpha_iters"]), lr=float(c["lr"]), epochs=int(c["epochs"]))


def _accuracy(model: ModelGraph, ids, labels, mode: str) -> float:
    with torch.no_grad():
        logits = classify(model, forward(model, ids, mode=mode), ids)
    return float(100.0 * np.mean(logits.argmax(dim=1).numpy() == np.asarray(labels)))


# ------------------------------------------------------------ commands ----


def cmd_synth(c: dict) -> dict:
    synth = dict(c.get("synth", {}))
    synth["seed"] = int(c["seed"])
    cfg = SynthConfig.from_dict(synth)
    model, data = synthesize(cfg)
    out = _out(c["out"])
    io.save_model(model, out / "model.json")
    io.write_json(out / "data.json", data)
    return {"model": str(out / "model.json"), "data": str(out / "data.json")}


def _probe_ids(c: dict, model: ModelGraph, count: int = 64):
    if c.get("data"):
        seqs = io.read_json(c["data"]).get("eval", {}).get("sequences")
        if seqs:
            return np.asarray(seqs[:count])
    rng = np.random.default_rng([int(c["seed"]), 7])
    return rng.integers(0, int(model.meta["vocab"]), size=(count, 32))


def cmd_migrate(c: dict) -> dict:
    model = io.load_model(c["model"])
    migrated, _ = migrate(model)
    report = equivalence_report(model, migrated, _probe_ids(c, model))
    out = _out(c["out"])
    io.save_model(migrated, out / "model_migrated.json")
    io.write_json(out / "equivalence.json", report)
    print(f"max relative difference {report['max_rel_diff']:.3e} over {report['n_sequences']} sequences")
    return report


def _prepared(model: ModelGraph, bits: dict, do_migrate: bool) -> ModelGraph:
    if not model.quant_nodes:
        place_quant_nodes(model, bits)
    if do_migrate and model.ln_mode == "scaling":
        model, _ = migrate(model)
    return model


def cmd_calibrate(c: dict) -> CalibrationResult:
    bits = parse_bits(c["bits"])
    model = _prepared(io.load_model(c["model"]), bits, bool(c["migrate"]))
    data = io.read_json(c["data"])
    calib = CalibrationSet.from_data(data)
    res = calibrate(
        model,
        calib,
        c["method"],
        _search_cfg(c),
        percentile_ratio=float(c["percentile_ratio"]),
        omse_search=c["omse_search"],
    )
    out = _out(c["out"])
    io.write_json(out / "calibration.json", res.to_dict(model))
    io.write_csv(out / "loss_trace.csv", TRACE_HEADER, res.trace_rows())
    io.write_csv(out / "timing.csv", TIMING_HEADER, [[res.method, k, f"{v:.6f}"] for k, v in res.timing.items()])
    res.apply(model)
    io.save_model(model, out / "model_quantized.json")
    print(f"{res.method}: L = {res.loss:.6g}" + (f" (alpha {res.alpha:g})" if res.alpha is not None else ""))
    return res


def _load_calibrated(c: dict) -> ModelGraph:
    model = io.load_model(c["model"])
    if c.get("calibration"):
        doc = io.read_json(c["calibration"])
        res = CalibrationResult.from_dict(doc)
        meta = doc.get("meta", {})
        bits = meta.get("bits") or parse_bits(c["bits"])
        bits = {"weight": bits.get("weight"), "embedding": bits.get("embedding"), "activation": bits.get("activation")}
        if meta.get("ln_mode") == "scaling" and model.ln_mode != "scaling":
            raise ConfigurationError("calibration was made on an unmigrated model but the given model is migrated")
        model = _prepared(model, bits, meta.get("ln_mode") == "non-scaling")
        res.apply(model)
    return model


def cmd_eval(c: dict) -> dict:
    model = _load_calibrated(c)
    data = io.read_json(c["data"])
    ids, labels = np.asarray(data["eval"]["sequences"]), data["eval"]["labels"]
    fp = _accuracy(model, ids, labels, "fp")
    qa = _accuracy(model, ids, labels, "quant")
    evalset = CalibrationSet(ids, int(data.get("meta", {}).get("batch_size", 32)))
    loss = quant_loss(model, evalset)
    res = {"accuracy_fp": fp, "accuracy_quant": qa, "loss": loss, "n_eval": int(ids.shape[0])}
    if c.get("out"):
        io.write_json(_out(c["out"]) / "eval.json", res)
    print(f"accuracy fp {fp:.2f}  quant {qa:.2f}  L(eval) {loss:.6g}")
    return res


def sweep_clips(model: ModelGraph, calib: CalibrationSet, kind: str = "MHA-LN") -> list:
    """Clip values for the sweep: unclipped, the max, then fractions of the ordinary envelope."""
    acts = calib.cache(model).acts
    top = max(float(acts[s].abs().max()) for s in model.slots() if s.endswith(kind))
    env = M.ordinary_envelope(model, calib, kind)
    return [math.inf, top] + [env * f for f in (1.0, 0.875, 0.75, 0.625, 0.5, 0.375, 0.25)]


def cmd_report(c: dict) -> dict:
    run = Path(c["run"])
    mpath, dpath = run / "model.json", run / "data.json"
    if not mpath.exists() or not dpath.exists():
        raise ConfigurationError(f"run directory {run} needs model.json and data.json (run `ptqkit synth` first)")
    model = io.load_model(mpath)
    data = io.read_json(dpath)
    calib = CalibrationSet.from_data(data)
    bits = parse_bits(c["bits"])
    if (run / "calibration.json").exists():
        bits = io.read_json(run / "calibration.json")["meta"].get("bits", bits)
    nodes = M.rank_problematic_nodes(model, calib, int(bits["activation"]))
    io.write_csv(
        run / "node_report.csv",
        M.NODE_HEADER,
        [[i + 1, r.slot, r.kind, f"{r.similarity:.2f}", int(r.flagged)] for i, r in enumerate(nodes)],
    )
    clips = sweep_clips(model, calib)
    io.write_csv(run / "outlier_report.csv", M.OUTLIER_HEADER, M.outlier_rows(model, calib, clip_values=clips[1:]))
    ids, labels = np.asarray(data["eval"]["sequences"]), data["eval"]["labels"]
    sweep = M.clip_impact_sweep(model, ids, labels, "MHA-LN", clips)
    io.write_csv(run / "clip_sweep.csv", M.sweep_header(model), M.sweep_rows(sweep))
    io.write_csv(run / "size_report.csv", M.SIZE_HEADER, M.size_rows(model))
    files = ["node_report.csv", "outlier_report.csv", "clip_sweep.csv", "size_report.csv"]
    print("wrote " + ", ".join(files))
    return {"files": files, "worst": [r.slot for r in nodes[:3]]}


def cmd_pipeline(c: dict) -> dict:
    out = _out(c["out"])
    cmd_synth(dict(c, out=str(out)))
    c = dict(c, model=str(out / "model.json"), data=str(out / "data.json"), out=str(out))
    cmd_migrate(c)
    cmd_calibrate(dict(c, model=str(out / "model_migrated.json")))
    ev = cmd_eval(dict(c, calibration=str(out / "calibration.json")))
    cmd_report(dict(c, run=str(out)))
    return ev


# ---------------------------------------------------------------- main ----


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ptqkit", description="Post-training quantization toolkit for transformer encoders.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, *flags):
        sp.add_argument("--config", help="JSON file with default values for any flag")
        sp.add_argument("--seed", type=int)
        for f in flags:
            if f == "model":
                sp.add_argument("--model", required=True)
            elif f == "data":
                sp.add_argument("--data", required=True)
            elif f == "data?":
                sp.add_argument("--data")
            elif f == "out":
                sp.add_argument("--out", required=True)
            elif f == "out?":
                sp.add_argument("--out")
            elif f == "calib":
                sp.add_argument("--method", choices=METHODS)
                sp.add_argument("--bits", help="W-E-A bit-widths, e.g. 6-6-6")
                sp.add_argument("--migrate", action="store_const", const=True, help="apply Gamma Migration before calibrating")
                sp.add_argument("--alpha-iters", dest="alpha_iters", type=int)
                sp.add_argument("--lr", type=float)
                sp.add_argument("--epochs", type=int)
                sp.add_argument("--percentile-ratio", dest="percentile_ratio", type=float)
                sp.add_argument("--omse-search", dest="omse_search", choices=("grid", "golden"))

    common(sub.add_parser("synth", help="generate a planted-outlier model and data"), "out")
    common(sub.add_parser("migrate", help="apply Gamma Migration and check equivalence"), "model", "data?", "out")
    common(sub.add_parser("calibrate", help="calibrate activation quantizers"), "model", "data", "out", "calib")
    ev = sub.add_parser("eval", help="evaluate a calibrated model")
    common(ev, "model", "data", "out?")
    ev.add_argument("--calibration")
    ev.add_argument("--bits")
    rp = sub.add_parser("report", help="write diagnostic CSVs for a run directory")
    common(rp)
    rp.add_argument("--run", required=True)
    rp.add_argument("--bits")
    common(sub.add_parser("pipeline", help="synth, migrate, calibrate, eval and report in one go"), "out", "calib")
    return p


COMMANDS = {
    "synth": cmd_synth,
    "migrate": cmd_migrate,
    "calibrate": cmd_calibrate,
    "eval": cmd_eval,
    "report": cmd_report,
    "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        c = _resolve(args)
        COMMANDS[args.command](c)
    except UsageError as e:
        print(f"ptqkit: usage error: {e}", file=sys.stderr)
        return 1
    except NumericalError as e:
        print(f"ptqkit: numerical error: {e}", file=sys.stderr)
        return 3
    except (PTQError, ValueError, KeyError, OSError, ZeroDivisionError) as e:
        print(f"ptqkit: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
