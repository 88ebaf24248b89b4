"""``emgpose`` command line: data generation, training, evaluation,
retargeting, streaming and latency benchmarking.

Every subcommand accepts ``--config FILE`` (a JSON object). Keys are the
long flag names with dashes or underscores; an object under the subcommand
name (e.g. ``{"train": {"epochs": 5}}``) overrides top-level keys for that
subcommand. Flags given on the command line win over the config file.
Objects under ``synth``, ``model``, ``optimizer`` and ``solver`` set fields
of the generator, network, training and retargeting configurations.

Exit status: 0 on success, 1 for invalid input (error JSON on stderr),
2 for file-system errors.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from . import hand_model as hm
from . import net
from .data import (
    load_recording,
    read_keypoint_jsonl,
    read_pose_jsonl,
    save_recording,
    synchronize,
    window_arrays,
    write_pose_jsonl,
)
from .evaluation import evaluate_holdout, export_joint_csv, mae_report
from .exceptions import FormatError, SafetyInvariantError, StateError, TrainingError, ValidationError
from .retarget import RetargetConfig, normalize_human_frame, retarget_pose
from .stream import StreamConfig, StreamingEngine, latency_stats, replay
from .synth import SynthConfig, gen_synth

DEFAULTS = {
    "seed": 0,
    "window": 400,
    "execute": 20,
    "epochs": 40,
    "split": 0.8,
    "stride": 40,
    "lr": 1e-3,
    "batch_size": 16,
    "duration": 60.0,
    "chunks": 10,
    "joints": "THUMB_CMC_FE,INDEX_MCP_FE",
    "rate": 500.0,
}


# training recipe used unless the config's "optimizer" object overrides it;
# the EMG augmentations keep the signal envelope and stop the network from
# memorizing the fine structure of a short recording
TRAIN_DEFAULTS = {"polarity_flip": True, "time_shift": 8, "lr_decay": 0.97}

SUBCOMMANDS = ("gen-synth", "train", "eval", "retarget", "stream", "bench")


class UsageError(ValidationError):
    pass


def _emit_json(obj, path=None):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def _resolve(args, config, name):
    """Flag value if given, else config value, else the default."""
    value = getattr(args, name, None)
    if value is not None:
        return value
    for key in (name, name.replace("_", "-")):
        if key in config:
            return config[key]
    return DEFAULTS.get(name)


def _load_config(args):
    if not args.config:
        return {}
    try:
        data = json.loads(Path(args.config).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ValidationError("config file must hold a JSON object")
    merged = {k: v for k, v in data.items() if k not in SUBCOMMANDS}
    section = data.get(args.command)
    if isinstance(section, dict):
        merged.update(section)
    return merged


def _require(value, name):
    if value is None:
        raise UsageError(f"--{name.replace('_', '-')} is required")
    return value


def _sub_config(cls, config, prefix):
    """Instantiate a dataclass from ``config[prefix]`` (a dict) if present."""
    extra = config.get(prefix) or {}
    if not isinstance(extra, dict):
        raise ValidationError(f"config key {prefix!r} must be an object")
    names = {f.name for f in fields(cls)}
    unknown = set(extra) - names
    if unknown:
        raise ValidationError(f"unknown {prefix} keys: {sorted(unknown)}")
    return extra


# ----------------------------------------------------------------------------
# subcommands


def cmd_gen_synth(args, config):
    """Write a synthetic recording as ``.eprc`` plus a ``.jsonl`` sibling."""
    out = Path(_require(_resolve(args, config, "out"), "out"))
    seed = int(_resolve(args, config, "seed"))
    duration = float(_resolve(args, config, "duration"))
    extra = _sub_config(SynthConfig, config, "synth")
    cfg = SynthConfig(**{**extra, "seed": seed, "duration": duration})
    rec = gen_synth(cfg)
    binary = out if out.suffix == ".eprc" else out.with_suffix(".eprc")
    save_recording(rec, binary)
    save_recording(rec, binary.with_suffix(".jsonl"))
    _emit_json({"recording": str(binary), "jsonl": str(binary.with_suffix(".jsonl")),
                "emg_samples": int(rec.emg.shape[1]), "pose_frames": int(rec.poses.shape[1]), "seed": seed})
    return 0


def _train_part(rec, split):
    rec = synchronize(rec)
    cut = int(round(split * rec.n_emg))
    return rec, cut


def cmd_train(args, config):
    """Train on the first ``split`` fraction of a recording."""
    rec = load_recording(_require(_resolve(args, config, "input"), "input"))
    out = _require(_resolve(args, config, "out"), "out")
    seed = int(_resolve(args, config, "seed"))
    window = int(_resolve(args, config, "window"))
    split = float(_resolve(args, config, "split"))
    rec.validate()
    rec, cut = _train_part(rec, split)
    model_extra = _sub_config(net.ModelConfig, config, "model")
    mcfg = net.ModelConfig.from_dict({**model_extra, "chunk_len": window})
    params = net.init_params(mcfg, seed=seed)
    samples = window_arrays(rec.emg[:, :cut], rec.poses[:, :cut], window,
                            int(_resolve(args, config, "stride")), params["theta0"])
    # lr, batch size, epochs and seed always come from flags or top-level keys
    opt_extra = _sub_config(net.OptimizerConfig, config, "optimizer")
    ocfg = net.OptimizerConfig(**{
        **TRAIN_DEFAULTS,
        **opt_extra,
        "lr": float(_resolve(args, config, "lr")),
        "batch_size": int(_resolve(args, config, "batch_size")),
        "epochs": int(_resolve(args, config, "epochs")),
        "seed": seed,
    })
    result = net.train(params, samples, ocfg)
    net.save_params(result.params, out)
    summary = {"params": str(out), "windows": len(samples), "train_loss": result.train_loss, "seed": seed}
    log = _resolve(args, config, "log")
    if log:
        _emit_json(summary, log)
    _emit_json(summary)
    return 0


def cmd_eval(args, config):
    """Score held-out predictions; writes an ``emgpose-report/1`` JSON."""
    model = hm.load_model()
    rec = load_recording(_require(_resolve(args, config, "input"), "input"))
    rec.validate()
    split = float(_resolve(args, config, "split"))
    rec = synchronize(rec)
    pred_file = _resolve(args, config, "pred")
    params_file = _resolve(args, config, "params")
    if pred_file:
        idx, pred, _ = read_pose_jsonl(pred_file)
        if len(idx) == 0:
            raise ValidationError("prediction file holds no poses")
        if idx.min() < 0 or idx.max() >= rec.n_emg:
            raise ValidationError("prediction indices fall outside the recording")
        gt = rec.poses[:, idx]
        tasks = [str(rec.meta["task"])] * len(idx) if "task" in rec.meta else None
        report = mae_report(pred, gt, model.joint_names, tasks=tasks, protocol="given-predictions")
        pred_full, gt_full = pred, gt
    else:
        params = net.load_params(_require(params_file, "params"))
        window = int(_resolve(args, config, "window"))
        report = evaluate_holdout(params, rec, model.joint_names, split=split, window=window,
                                  execute=int(_resolve(args, config, "execute")))
        from .evaluation import anchored_predictions

        cut = int(round(split * rec.n_emg))
        pred_full, covered = anchored_predictions(params, rec.emg[:, cut:], rec.poses[:, cut:], window,
                                                  rec.poses[:, cut - 1])
        gt_full = rec.poses[:, cut : cut + covered]
    csv_path = _resolve(args, config, "csv")
    if csv_path:
        joints = [j for j in str(_resolve(args, config, "joints")).split(",") if j]
        export_joint_csv(pred_full, gt_full, joints, csv_path, model.joint_names)
    out = _resolve(args, config, "out")
    _emit_json(report.to_dict(), out)
    if out:
        _emit_json({"report": str(out), "mae": report.mae, "frames": report.frames})
    return 0


def cmd_retarget(args, config):
    """Keypoint JSONL in, pose JSONL out."""
    model = hm.load_model()
    labels, normalized, t_us, frames = read_keypoint_jsonl(_require(_resolve(args, config, "input"), "input"))
    out = _require(_resolve(args, config, "out"), "out")
    rcfg = RetargetConfig(**_sub_config(RetargetConfig, config, "solver"))
    rcfg.resolve(model)
    poses, extras = [], []
    q_prev = None
    for pts in frames:
        kps = hm.KeypointSet(pts, labels)
        if not normalized:
            kps = normalize_human_frame(kps, model)
        res = retarget_pose(model, kps, rcfg, q_init=q_prev, q_prev_safe=q_prev)
        q_prev = res.pose
        poses.append(res.pose)
        extras.append({"residual": res.residual, "iterations": res.iterations,
                       "clamped": res.clamped, "converged": res.converged})
    arr = np.array(poses).T if poses else np.zeros((model.n_dof, 0))
    write_pose_jsonl(out, arr, model.joint_names, t_us=t_us, extras=extras)
    _emit_json({"poses": str(out), "frames": len(poses),
                "clamped": int(sum(e["clamped"] for e in extras)),
                "max_residual": max((e["residual"] for e in extras), default=None)})
    return 0


def cmd_stream(args, config):
    """Replay a recording through the streaming engine."""
    model = hm.load_model()
    rec = load_recording(_require(_resolve(args, config, "input"), "input"))
    rec.validate()
    params = net.load_params(_require(_resolve(args, config, "params"), "params"))
    scfg = StreamConfig(
        window=int(_resolve(args, config, "window")),
        execute=int(_resolve(args, config, "execute")),
        realtime=bool(_resolve(args, config, "realtime")),
        rate=float(rec.emg_rate),
    )
    engine = StreamingEngine(params, scfg)
    out_poses = replay(engine, rec.emg, block=scfg.execute)
    first = scfg.window - scfg.execute
    idx = np.arange(first, first + out_poses.shape[1])
    out = _require(_resolve(args, config, "out"), "out")
    write_pose_jsonl(out, out_poses, model.joint_names, indices=idx, t_us=rec.emg_t_us[idx])
    stats = latency_stats(engine).to_dict()
    stats["emitted"] = int(out_poses.shape[1])
    stats_path = _resolve(args, config, "stats")
    if stats_path:
        _emit_json(stats, stats_path)
    _emit_json(stats)
    return 0


def cmd_bench(args, config):
    """Time single-chunk inference on random input."""
    seed = int(_resolve(args, config, "seed"))
    window = int(_resolve(args, config, "window"))
    params_file = _resolve(args, config, "params")
    if params_file:
        params = net.load_params(params_file)
    else:
        params = net.init_params(net.ModelConfig(chunk_len=window), seed=seed)
    scfg = StreamConfig(window=window, execute=int(_resolve(args, config, "execute")),
                        realtime=bool(_resolve(args, config, "realtime")),
                        rate=float(_resolve(args, config, "rate")))
    engine = StreamingEngine(params, scfg)
    n_chunks = int(_resolve(args, config, "chunks"))
    rng = np.random.default_rng(seed)
    emg = rng.uniform(-1.0, 1.0, size=(params.config.in_channels, window + (n_chunks - 1) * scfg.execute))
    replay(engine, emg, block=scfg.execute)
    stats = latency_stats(engine).to_dict()
    _emit_json(stats, _resolve(args, config, "out"))
    return 0


# ----------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(prog="emgpose", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"emgpose {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(func=func)
        p.add_argument("--config", help="JSON config file; command-line flags override it")
        p.add_argument("--seed", type=int, help="random seed (default 0)")
        return p

    p = add("gen-synth", cmd_gen_synth, "generate a synthetic muscle-synergy recording")
    p.add_argument("--out", help="output .eprc path; a .jsonl copy is written next to it")
    p.add_argument("--duration", type=float, help="length in seconds (default 60)")

    p = add("train", cmd_train, "train a network on the leading part of a recording")
    p.add_argument("--input", help="recording (.eprc or .jsonl)")
    p.add_argument("--out", help="output parameter file")
    p.add_argument("--window", type=int, help="window length W in samples (default 400)")
    p.add_argument("--stride", type=int, help="training window stride in samples (default 40)")
    p.add_argument("--epochs", type=int, help="training epochs (default 40)")
    p.add_argument("--split", type=float, help="fraction of samples used for training (default 0.8)")
    p.add_argument("--lr", type=float, help="Adam learning rate (default 1e-3)")
    p.add_argument("--batch-size", dest="batch_size", type=int, help="mini-batch size (default 16)")
    p.add_argument("--log", help="also write the training summary JSON here")

    p = add("eval", cmd_eval, "evaluate predictions on the held-out part of a recording")
    p.add_argument("--input", help="recording (.eprc or .jsonl)")
    p.add_argument("--params", help="parameter file to evaluate")
    p.add_argument("--pred", help="pose JSONL with predictions to score instead of --params")
    p.add_argument("--window", type=int, help="evaluation window in samples (default 400)")
    p.add_argument("--execute", type=int, help="frames per chunk for the streaming MAE (default 20)")
    p.add_argument("--split", type=float, help="held-out part starts at this fraction (default 0.8)")
    p.add_argument("--out", help="report path (JSON); printed to stdout when omitted")
    p.add_argument("--csv", help="write joint trajectories (ground truth and prediction) as CSV")
    p.add_argument("--joints", help="comma-separated joints for --csv (default THUMB_CMC_FE,INDEX_MCP_FE)")

    p = add("retarget", cmd_retarget, "retarget a keypoint JSONL stream to joint angles")
    p.add_argument("--input", help="keypoint JSONL file")
    p.add_argument("--out", help="output pose JSONL file")

    p = add("stream", cmd_stream, "run the streaming engine over a recording")
    p.add_argument("--input", help="recording (.eprc or .jsonl)")
    p.add_argument("--params", help="parameter file")
    p.add_argument("--window", type=int, help="window W in samples (default 400)")
    p.add_argument("--execute", type=int, help="commands emitted per inference E (default 20)")
    p.add_argument("--realtime", action="store_true", default=None,
                   help="pace input at the recording rate and count deadline misses")
    p.add_argument("--out", help="output pose JSONL file")
    p.add_argument("--stats", help="also write latency statistics JSON here")

    p = add("bench", cmd_bench, "measure per-chunk inference latency")
    p.add_argument("--params", help="parameter file (default: random weights)")
    p.add_argument("--window", type=int, help="window W in samples (default 400)")
    p.add_argument("--execute", type=int, help="commands per inference E (default 20)")
    p.add_argument("--chunks", type=int, help="number of chunks to time (default 10)")
    p.add_argument("--rate", type=float, help="sample rate in Hz for the deadline budget (default 500)")
    p.add_argument("--realtime", action="store_true", default=None, help="pace input in real time")
    p.add_argument("--out", help="write latency JSON here instead of stdout")
    return parser


def _error(kind, exc, status):
    payload = {"error": kind, "message": str(exc)}
    for attr in ("section", "offset", "sample_index"):
        if getattr(exc, attr, None) is not None:
            payload[attr] = getattr(exc, attr)
    sys.stderr.write(json.dumps(payload) + "\n")
    return status


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _load_config(args)
        return args.func(args, config)
    except FormatError as exc:
        return _error("format", exc, 1)
    except (ValidationError, TypeError) as exc:
        return _error("validation", exc, 1)
    except (TrainingError, SafetyInvariantError, StateError) as exc:
        return _error(type(exc).__name__, exc, 1)
    except OSError as exc:
        return _error("io", exc, 2)


if __name__ == "__main__":
    sys.exit(main())
