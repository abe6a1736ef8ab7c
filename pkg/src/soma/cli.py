"""Command-line entry point: ``soma synth|train|label|eval|experiment|attention-report``.

Each command reads an optional JSON config (``--config``), takes its files as
positional arguments and accepts ``--seed`` to override the config seed.
``SOMA_THREADS`` caps the number of worker threads.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

from . import body as bodymod
from . import checkpoint as ckpt
from . import experiments as ex
from . import io
from . import noise as noisemod
from .core import LabelSet, MoCapSequence
from .labeler import MODES, label_sequence, tracklet_label
from .net import NetConfig
from .train import HISTORY_FIELDS, AdamState, TrainConfig, TrainState, build_gt_assignment, train

log = logging.getLogger("soma")


class CliError(Exception):
    pass


# --- config helpers -------------------------------------------------------------

SYNTH_DEFAULTS = {
    "body": None, "layout": "desk12", "noise": "B+C+G",
    "n_sequences": 1, "duration_s": 10.0, "rate_hz": 30.0, "n_breaks": 0, "seed": 0,
}
TRAIN_DEFAULTS = {
    "body": None, "layout": "desk12", "noise": "B+C+G",
    "n_train": 2000, "n_val": 200, "train_files": [], "val_files": [],
    "net": {"d_model": 32, "heads": 4, "layers": 3, "feature_width": 64},
    "train": {"lr": 3e-3, "weight_cap": 1.0}, "seed": 0,
}
LABEL_DEFAULTS = {"mode": "greedy", "tracklets": False, "batch_size": 256}
EXPERIMENT_DEFAULTS = {
    "grid": "noise", "body": None, "layout": "desk12",
    "net": {"d_model": 32, "heads": 4, "layers": 3, "feature_width": 64},
    "train": {"max_epochs": 20, "lr": 3e-3, "weight_cap": 1.0}, "n_train": 3000, "n_val": 300, "n_test": 500,
    "checkpoint": None, "checkpoints": {}, "n_sequences": 5, "duration_s": 10.0, "seed": 0,
}


def load_config(path, defaults: dict, seed=None) -> dict:
    cfg = json.loads(json.dumps(defaults))
    if path:
        p = Path(path)
        if not p.exists():
            raise CliError(f"config file not found: {p}")
        try:
            user = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise CliError(f"config {p} is not valid JSON: {exc}") from None
        unknown = set(user) - set(defaults)
        if unknown:
            raise CliError(f"unknown config keys in {p}: {sorted(unknown)}")
        for k, v in user.items():
            # nested option groups (net, train, ...) merge key by key
            cfg[k] = {**cfg[k], **v} if isinstance(cfg[k], dict) and isinstance(v, dict) else v
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def workers() -> int:
    cap = os.environ.get("SOMA_THREADS")
    if not cap:
        return 1
    try:
        return max(1, int(cap))
    except ValueError:
        raise CliError(f"SOMA_THREADS must be an integer, got {cap!r}") from None


def _train_config(d: dict, seed: int) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    bad = set(d) - known
    if bad:
        raise CliError(f"unknown training options: {sorted(bad)}")
    d = dict(d)
    d.setdefault("seed", seed)
    if "betas" in d:
        d["betas"] = tuple(d["betas"])
    return TrainConfig(**d)


def _sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --- commands ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = load_config(args.config, SYNTH_DEFAULTS, args.seed)
    chash = ckpt.config_hash(cfg)
    body = bodymod.load_body(cfg["body"])
    layout = bodymod.load_layout(cfg["layout"], body)
    nc = noisemod.noise_config(cfg["noise"])
    out = Path(args.out_dir)
    files = []
    for s in range(int(cfg["n_sequences"])):
        seq = noisemod.generate_sequence(body, layout, nc, cfg["duration_s"], cfg["rate_hz"],
                                         seed=cfg["seed"] * 1000 + s, n_breaks=int(cfg["n_breaks"]))
        expected = int(round(cfg["duration_s"] * cfg["rate_hz"]))
        if len(seq) != expected:
            raise CliError(f"synthesised {len(seq)} frames, expected {expected}")
        stem = f"seq_{s:03d}"
        io.write_mpc(out / f"{stem}.jsonl", seq, with_labels=False, config_hash=chash)
        io.write_mpc(out / f"{stem}.labels.jsonl", seq, with_labels=True, config_hash=chash)
        io.write_gt(out / f"{stem}.gt.jsonl", seq, config_hash=chash)
        files += [f"{stem}.jsonl", f"{stem}.labels.jsonl", f"{stem}.gt.jsonl"]
    for name in files:
        io.read_labelled(out / name) if name.endswith(".gt.jsonl") else io.read_mpc(out / name)
    io.write_json(out / "manifest.json", {
        "command": "synth", "config": cfg, "config_hash": chash, "seed": cfg["seed"],
        "noise": nc.to_json(), "files": {n: _sha256_file(out / n) for n in files},
    })
    print(f"wrote {len(files)} files to {out}")
    return 0


def _labelled_corpus(paths, M: int) -> list:
    pairs = []
    for p in paths:
        seq = io.read_mpc(p)
        for f in seq.frames:
            if f.labels is None:
                raise CliError(f"{p}: training files need labels")
            if f.n:
                pairs.append((f, build_gt_assignment(f.labels, None, M)))
    return pairs


def cmd_train(args) -> int:
    cfg = load_config(args.config, TRAIN_DEFAULTS, args.seed)
    chash = ckpt.config_hash(cfg)
    seed = int(cfg["seed"])
    body = bodymod.load_body(cfg["body"])
    layout = bodymod.load_layout(cfg["layout"], body)
    tc = _train_config(cfg["train"], seed)
    net_kw = dict(cfg["net"])
    net_kw.setdefault("init_seed", seed)
    net_cfg = NetConfig(n_labels=layout.M, **net_kw)
    nc = noisemod.noise_config(cfg["noise"])
    w = workers()
    if cfg["train_files"]:
        tr = _labelled_corpus(cfg["train_files"], layout.M)
    else:
        tr = noisemod.generate_training_corpus(body, layout, nc, int(cfg["n_train"]), seed * 1000 + 1, w)
    if cfg["val_files"]:
        va = _labelled_corpus(cfg["val_files"], layout.M)
    else:
        va = noisemod.generate_training_corpus(body, layout, nc, int(cfg["n_val"]), seed * 1000 + 2, w)

    state = None
    if args.resume:
        c = ckpt.load(args.resume)
        if c.cfg != net_cfg:
            raise CliError("resume checkpoint was made with a different network config")
        if c.adam_m is None:
            raise CliError(f"{args.resume} holds no optimiser state; resume from last.ckpt")
        m = c.meta
        opt = AdamState(c.adam_m, c.adam_v, int(m["adam_step"]))
        best = None
        best_path = Path(args.resume).parent / m.get("best_path", "best.ckpt")
        if best_path.exists():
            best = ckpt.load(best_path).params
        state = TrainState(c.params, opt, int(m["epoch"]), float(m["lr"]), float(m["best_acc"]),
                           int(m["best_epoch"]), int(m["plateau_bad"]), int(m["stop_bad"]),
                           list(m.get("history", [])), best)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = list(layout.label_set.names)

    def save_state(st: TrainState):
        meta = {"config_hash": chash, "seed": seed, "epoch": st.epoch, "lr": st.lr,
                "best_acc": st.best_acc, "best_epoch": st.best_epoch, "plateau_bad": st.plateau_bad,
                "stop_bad": st.stop_bad, "adam_step": st.opt.step, "history": st.history,
                "best_path": "best.ckpt", "train_config": tc.to_json()}
        if st.best_params is not None and st.best_epoch == st.epoch - 1:
            ckpt.save(out / "best.ckpt", net_cfg, st.best_params, names,
                      {**meta, "kind": "best", "val_acc": st.best_acc})
        ckpt.save(out / "last.ckpt", net_cfg, st.params, names, {**meta, "kind": "last"},
                  st.opt.m, st.opt.v)
        io.write_csv(out / "history.csv", HISTORY_FIELDS, st.history, chash)

    t0 = time.perf_counter()
    res = train(net_cfg, tr, va, tc, state, on_epoch=save_state)
    if not (out / "best.ckpt").exists():
        ckpt.save(out / "best.ckpt", net_cfg, res.best_params, names, {"config_hash": chash, "kind": "best"})
    ckpt.load(out / "best.ckpt")
    ckpt.load(out / "last.ckpt")
    print(f"trained {res.last.epoch} epochs in {time.perf_counter() - t0:.1f}s; "
          f"best val acc {100 * res.last.best_acc:.2f}% at epoch {res.last.best_epoch}")
    return 0


def cmd_label(args) -> int:
    cfg = load_config(args.config, LABEL_DEFAULTS, None)
    if args.tracklets:
        cfg["tracklets"] = True
    if args.mode:
        cfg["mode"] = args.mode
    if cfg["mode"] not in MODES:
        raise CliError(f"unknown decode mode {cfg['mode']!r}")
    model = ckpt.load(args.checkpoint)
    seq = io.read_mpc(args.mpc_in)
    if seq.label_set is not None and seq.label_set.M and list(seq.label_set.names) != list(model.label_names):
        raise CliError("input label set differs from the checkpoint's labels")
    labels, conf = label_sequence(model.params, model.cfg, seq, cfg["mode"], int(cfg["batch_size"]))
    flagged = []
    if cfg["tracklets"]:
        ids = [f.tracklet_ids for f in seq.frames]
        labels, flagged = tracklet_label(labels, ids, model.cfg.n_labels)
    label_set = LabelSet(tuple(model.label_names))
    out_seq = MoCapSequence(tuple(f.with_labels(l) for f, l in zip(seq.frames, labels)),
                            seq.rate_hz, label_set)
    chash = ckpt.config_hash({"label": cfg, "model": model.config_hash})
    io.write_mpc(args.mpc_out, out_seq, config_hash=chash)
    io.read_mpc(args.mpc_out)
    io.write_confidence(str(args.mpc_out) + ".conf.csv", conf, flagged, chash)
    print(f"labelled {len(seq)} frames -> {args.mpc_out}" + (f" ({len(flagged)} flagged)" if flagged else ""))
    return 0


def cmd_eval(args) -> int:
    pred_set, pred = io.read_labelled(args.pred_file)
    gt_set, gt = io.read_labelled(args.gt_file)
    if pred_set.names != gt_set.names:
        raise CliError("prediction and ground truth use different label sets")
    rep = ex.eval_report(pred, gt, gt_set.null)
    print(ex.render_report(rep))
    if args.out:
        io.write_json(args.out, {**rep, "pred": str(args.pred_file), "gt": str(args.gt_file)})
    return 0


def _load_model(path):
    if not path:
        return None
    try:
        c = ckpt.load(path)
    except ckpt.CheckpointError as exc:
        raise CliError(f"{exc}; train one with `soma train` or drop the checkpoint entry to train inline") from None
    return c.params, c.cfg


def cmd_experiment(args) -> int:
    cfg = load_config(args.config, EXPERIMENT_DEFAULTS, args.seed)
    chash = ckpt.config_hash(cfg)
    setup = ex.DeskSetup(cfg["layout"], dict(cfg["net"]), _train_config(cfg["train"], cfg["seed"]),
                         int(cfg["n_train"]), int(cfg["n_val"]), int(cfg["n_test"]), int(cfg["seed"]),
                         workers(), cfg["body"])
    grid = cfg["grid"]
    if grid == "noise":
        models = {k: _load_model(v) for k, v in cfg["checkpoints"].items()}
        rows = ex.noise_grid(setup, models=models)
        table = ex.grid_table(rows)
    elif grid in ("occlusion", "tracklet"):
        model = _load_model(cfg["checkpoint"])
        if model is None:
            params, ncfg, _, _ = setup.fit("B+C+G")
        else:
            params, ncfg = model
        if grid == "occlusion":
            rows = ex.occlusion_sweep(setup, params, ncfg)
            table = [["occlusions", "Acc.", "F1"]] + [
                [f"{r['occlusions']}{'+' + r['ghosts'] if r['ghosts'] else ''}",
                 ex.cell(r["acc_mean"], r["acc_std"]), ex.cell(r["f1_mean"], r["f1_std"])] for r in rows]
        else:
            rows = ex.tracklet_comparison(setup, params, ncfg, int(cfg["n_sequences"]), float(cfg["duration_s"]))
            table = [["sequence", "Per-Frame", "Tracklet"]] + [
                [str(r["sequence"]), f"{r['per_frame_acc']:.2f}", f"{r['tracklet_acc']:.2f}"] for r in rows]
    elif grid == "layout":
        rows = ex.layout_robustness(setup)
        table = [["test layout", "markers", "Acc.", "F1"]] + [
            [r["test_layout"], str(r["markers"]), ex.cell(r["acc_mean"], r["acc_std"]),
             ex.cell(r["f1_mean"], r["f1_std"])] for r in rows]
    else:
        raise CliError(f"unknown grid {grid!r}; expected noise, occlusion, tracklet or layout")
    out = Path(args.out_dir)
    io.write_csv(out / "results.csv", list(rows[0]), rows, chash)
    text = ex.render_table(table)
    (out / "results.txt").write_text(f"# config_sha256={chash}\n{text}\n", encoding="utf-8")
    io.write_json(out / "config.json", {"config": cfg, "config_hash": chash})
    print(text)
    return 0


def cmd_attention_report(args) -> int:
    cfg = load_config(args.config, {"body": None, "layout": None, "max_frames": 200, "seed": 0}, args.seed)
    model = ckpt.load(args.checkpoint)
    seq = io.read_mpc(args.corpus)
    if any(f.labels is None for f in seq.frames):
        raise CliError(f"{args.corpus} must carry labels for an attention report")
    body = bodymod.load_body(cfg["body"])
    layout = bodymod.load_layout(cfg["layout"] or list(model.label_names), body)
    if list(layout.label_set.names) != list(model.label_names):
        raise CliError("layout labels differ from the checkpoint's labels")
    frames = [f for f in seq.frames if f.n][: int(cfg["max_frames"])]
    spans = ex.attention_span(model.params, model.cfg, frames, ex.canonical_distances(body, layout))
    chash = ckpt.config_hash({"report": cfg, "model": model.config_hash})
    rows = [{"layer": i + 1, "span_m": s} for i, s in enumerate(spans)]
    out = Path(args.out_dir)
    io.write_csv(out / "attention_span.csv", ("layer", "span_m"), rows, chash)
    io.write_json(out / "attention_span.json", {"x": [r["layer"] for r in rows], "y": spans,
                                                "xlabel": "layer", "ylabel": "attention span (m)",
                                                "config_hash": chash})
    print(ex.render_table([["layer", "span (m)"]] + [[str(r["layer"]), f"{r['span_m']:.4f}"] for r in rows]))
    return 0


# --- parser -------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="soma", description="Mocap point-cloud auto-labeling.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="JSON config file")
        if seed:
            sp.add_argument("--seed", type=int, help="override the config seed")
        return sp

    s = common(sub.add_parser("synth", help="synthesise labelled test sequences"))
    s.add_argument("out_dir")
    s.set_defaults(fn=cmd_synth)

    s = common(sub.add_parser("train", help="train a model"))
    s.add_argument("out_dir")
    s.add_argument("--resume", help="last.ckpt to continue from")
    s.set_defaults(fn=cmd_train)

    s = common(sub.add_parser("label", help="label a point-cloud file"))
    s.add_argument("checkpoint")
    s.add_argument("mpc_in")
    s.add_argument("mpc_out")
    s.add_argument("--tracklets", action="store_true", help="apply tracklet majority relabeling")
    s.add_argument("--mode", choices=MODES)
    s.set_defaults(fn=cmd_label)

    s = common(sub.add_parser("eval", help="score predictions against ground truth"))
    s.add_argument("pred_file")
    s.add_argument("gt_file")
    s.add_argument("--out", help="write the report as JSON")
    s.set_defaults(fn=cmd_eval)

    s = common(sub.add_parser("experiment", help="run an experiment grid"))
    s.add_argument("out_dir")
    s.set_defaults(fn=cmd_experiment)

    s = common(sub.add_parser("attention-report", help="per-layer attention span"))
    s.add_argument("checkpoint")
    s.add_argument("corpus")
    s.add_argument("out_dir")
    s.set_defaults(fn=cmd_attention_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.fn(args)
    except (CliError, io.FormatError, ckpt.CheckpointError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"soma {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
