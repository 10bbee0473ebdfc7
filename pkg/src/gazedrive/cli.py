"""``gazedrive`` command-line tool: data generation, maps, masking, training and evaluation."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import dataset_io as dio
from .attention import MapConfig
from .masking import MaskConfig, apply_mask
from .metrics import MetricConfig

log = logging.getLogger("gazedrive")

PROG = "gazedrive"


class CliError(Exception):
    """User-facing failure: reported on stderr with a nonzero exit code."""


# --------------------------------------------------------------------------- helpers


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _unit_float(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"expected a value in [0, 1], got {text}")
    return v


def _weights(text: str) -> tuple:
    try:
        w = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected four comma-separated numbers, got {text!r}") from None
    if len(w) != 4:
        raise argparse.ArgumentTypeError(f"expected four comma-separated numbers, got {text!r}")
    return w


def sidecar(ckpt) -> Path:
    return Path(f"{ckpt}.json")


def loss_log_path(ckpt) -> Path:
    return Path(f"{ckpt}.loss.tsv")


def series_path(ckpt) -> Path:
    return Path(f"{ckpt}.series.tsv")


def read_sidecar(ckpt, kind: str) -> dict:
    p = sidecar(ckpt)
    if not Path(ckpt).is_file():
        raise CliError(f"{ckpt}: checkpoint not found")
    if not p.is_file():
        raise CliError(f"{p}: checkpoint config not found")
    meta = json.loads(p.read_text())
    if meta.get("kind") != kind:
        raise CliError(f"{ckpt}: expected a {kind} checkpoint, found {meta.get('kind')!r}")
    return meta


def load_gaze(ckpt):
    from .model import GazeNet, GazeNetConfig, load_model

    cfg = GazeNetConfig.from_dict(read_sidecar(ckpt, "gaze")["config"])
    return load_model(ckpt, GazeNet.create(cfg))


def load_agent(ckpt):
    from .model import AgentConfig, DrivingAgent, load_model

    meta = read_sidecar(ckpt, "agent")
    cfg = AgentConfig.from_dict(meta["config"])
    return load_model(ckpt, DrivingAgent.create(cfg)), meta


def save_checkpoint(ckpt, model, kind: str, extra: Optional[dict] = None) -> None:
    from .model import save_model

    Path(ckpt).parent.mkdir(parents=True, exist_ok=True)
    save_model(ckpt, model)
    meta = {"kind": kind, "config": model.cfg.to_dict(), **(extra or {})}
    sidecar(ckpt).write_text(json.dumps(meta, indent=1) + "\n")


def map_config(args) -> MapConfig:
    return MapConfig(sigma=args.sigma, half_window=args.half_window, truncate=args.truncate)


def truth_maps(dataset: dio.Dataset, eid: str, cfg: MapConfig, jobs: int):
    """Stored ground-truth maps if present, otherwise computed from the gaze log."""
    if dio.map_dir(dataset.path(eid), "truth").is_dir():
        return dio.load_episode_maps(dataset.path(eid), "truth")
    return dio.fixation_maps(dataset.episode(eid), cfg, jobs)


def mean_truth_map(dataset: dio.Dataset, eids, cfg: MapConfig, jobs: int):
    from .attention import mean_fixation_map

    return mean_fixation_map([m for eid in eids for m in truth_maps(dataset, eid, cfg, jobs)])


def episode_masks(dataset, eid, source: str):
    """Per-frame maps driving the masks: gaze-network maps or ground truth."""
    kind = "predicted" if source == "predicted" else "truth"
    if not dio.map_dir(dataset.path(eid), kind).is_dir():
        hint = "run 'precompute' first" if kind == "predicted" else "run 'maps' first"
        raise CliError(f"{dataset.path(eid)}: no {kind} maps ({hint})")
    return dio.load_episode_maps(dataset.path(eid), kind)


def print_table(header, rows, out=None) -> None:
    """Aligned plain-text table (to stdout unless ``out`` is given)."""
    out = sys.stdout if out is None else out
    cells = [list(map(str, header))] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    for r in cells:
        out.write("  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths))).rstrip() + "\n")


def write_tsv(path, header, rows) -> None:
    lines = ["\t".join(header)] + ["\t".join(str(c) for c in r) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def _fmt(v: float) -> str:
    return f"{v:.4f}"


# --------------------------------------------------------------------------- subcommands


def cmd_gen(args) -> int:
    from .synth import EpisodeConfig, generate

    test = args.test_episodes if args.test_episodes is not None else (1 if args.episodes > 1 else 0)
    if test > args.episodes:
        raise CliError("--test-episodes exceeds --episodes")
    cfg = EpisodeConfig(frames=args.frames, traffic_fraction=args.traffic_fraction)
    if args.dry_run:
        return 0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ids = []
    for k, seq in enumerate(np.random.SeedSequence(args.seed).spawn(args.episodes)):
        eid = f"ep{k:03d}"
        _, episode = generate(int(seq.generate_state(1)[0]), args.frames, cfg)
        dio.save_episode(out / eid, episode)
        ids.append(eid)
        log.info("%s: %d frames, traffic fraction %.3f", eid, len(episode), dio.traffic_fraction(episode.labels))
    split = dio.DatasetSplit(ids[: len(ids) - test], ids[len(ids) - test :])
    dio.write_split(out, split)
    print(f"wrote {len(ids)} episodes x {args.frames} frames to {out}")
    return 0


def cmd_maps(args) -> int:
    cfg = map_config(args)
    dataset = dio.Dataset(args.input)
    if args.dry_run:
        return 0
    total = empty = 0
    for eid in dataset.episode_ids:
        maps = dio.fixation_maps(dataset.episode(eid), cfg, args.jobs)
        dio.write_episode_maps(dataset.path(eid), maps, "truth")
        total += len(maps)
        empty += sum(m.empty for m in maps)
    print(f"wrote {total} fixation maps ({empty} empty)")
    return 0


def cmd_precompute(args) -> int:
    dataset = dio.Dataset(args.input)
    model = load_gaze(args.gaze)
    if args.dry_run:
        return 0
    usage = dio.precompute_maps(dataset, model)
    print_table(["branch", "frames"], sorted(usage.items()))
    return 0


def cmd_mask(args) -> int:
    cfg = MaskConfig(lam=args.lam)
    dataset = dio.Dataset(args.input)
    if args.dry_run:
        return 0
    out = Path(args.out)
    mean_map = None
    if args.mode == "baseline":
        mean_map = mean_truth_map(dataset, dataset.split().train, map_config(args), args.jobs)
    count = 0
    for eid in dataset.episode_ids:
        ep_out = out / eid
        ep_out.mkdir(parents=True, exist_ok=True)
        manifest = dio.read_manifest(dataset.path(eid))
        maps = None if args.mode == "baseline" else episode_masks(dataset, eid, args.maps)

        def one(t):
            img = dio.load_image(dataset.path(eid) / manifest["frames"][t])
            amap = mean_map if maps is None else maps[t]
            dio.save_image(ep_out / dio.frame_name(t, "ppm"), apply_mask(args.mode, img, amap, cfg))

        dio._ordered_map(one, range(manifest["frame_count"]), args.jobs)
        count += manifest["frame_count"]
    print(f"wrote {count} {args.mode}-masked images to {out}")
    return 0


def _gaze_config(args):
    from .model import GazeNetConfig

    return GazeNetConfig(
        clip_length=args.clip_length,
        second_stream=args.second_stream,
        two_phase=args.two_phase,
        phase1_steps=args.phase1_steps,
        crop_stream=not args.no_crop_stream,
        shared_warmup_steps=args.steps if args.shared_warmup_steps is None else args.shared_warmup_steps,
        lr=args.lr,
        epsilon=args.epsilon,
        seed=args.seed,
    )


def cmd_train_gaze(args) -> int:
    from .model import GazeNet, build_gaze_frames, train_gaze
    from .model.checkpoint import write_loss_log

    cfg = _gaze_config(args)
    dataset = dio.Dataset(args.input)
    split = dataset.split()
    if args.dry_run:
        return 0
    mcfg = map_config(args)
    eids = list(split.train)
    frames = build_gaze_frames(
        [dataset.episode(e) for e in eids], cfg.clip_length, mcfg, truths=[truth_maps(dataset, e, mcfg, args.jobs) for e in eids]
    )
    model = GazeNet.create(cfg)
    losses = train_gaze(model, frames, args.steps, args.batch_size, args.seed)
    save_checkpoint(args.out, model, "gaze", {"train_episodes": eids, "steps": args.steps})
    write_loss_log(loss_log_path(args.out), losses)
    print(f"trained gaze net on {len(frames)} frames for {args.steps} steps; final loss {losses[-1]:.4f}")
    return 0


def _agent_frames(dataset, eids, variant, args, mean_map):
    from .model import build_agent_frames
    from .model.data import AgentFrames

    parts = []
    for eid in eids:
        maps = episode_masks(dataset, eid, args.maps) if variant in ("hard", "soft", "dual") else None
        parts.append(build_agent_frames(dataset.episode(eid), variant, maps, mean_map, MaskConfig(lam=args.lam)))
    return AgentFrames.concat(parts)


def cmd_train_agent(args) -> int:
    from .model import AgentConfig, DrivingAgent, train_agent
    from .model.checkpoint import write_loss_log
    from .model.evaluate import agent_eval_fn

    cfg = AgentConfig(variant=args.variant, lr=args.lr, task_weights=args.task_weights, seed=args.seed)
    MaskConfig(lam=args.lam)
    dataset = dio.Dataset(args.input)
    split = dataset.split()
    if args.eval_every and not split.test:
        raise CliError("--eval-every needs test episodes in the split")
    if args.dry_run:
        return 0
    mcfg = map_config(args)
    mean_map = mean_truth_map(dataset, split.train, mcfg, args.jobs) if args.variant == "baseline" else None
    frames = _agent_frames(dataset, split.train, args.variant, args, mean_map)
    eval_fn = None
    if args.eval_every:
        test = _agent_frames(dataset, split.test, args.variant, args, mean_map)
        eval_fn = agent_eval_fn(test, MetricConfig(task_weights=args.task_weights))
    model = DrivingAgent.create(cfg)
    losses, series = train_agent(model, frames, args.steps, args.batch_size, args.seed, eval_every=args.eval_every, eval_fn=eval_fn)
    extra = {"maps": args.maps, "lam": args.lam, "train_episodes": list(split.train), "steps": args.steps}
    if mean_map is not None:
        extra["mean_map_episodes"] = list(split.train)
    save_checkpoint(args.out, model, "agent", extra)
    write_loss_log(loss_log_path(args.out), losses)
    if series:
        write_tsv(series_path(args.out), ["step", "mse", "mae"], [(s, repr(a), repr(b)) for s, a, b in series])
    print(f"trained {args.variant} agent on {len(frames)} frames for {args.steps} steps; final loss {losses[-1]:.4f}")
    return 0


def _test_ids(dataset: dio.Dataset) -> list:
    split = dataset.split()
    ids = list(split.test) or list(split.train)
    if not split.test:
        log.warning("split has no test episodes; evaluating on all episodes")
    return ids


def cmd_eval_gaze(args) -> int:
    from .model import build_gaze_frames
    from .model.evaluate import evaluate_gaze

    dataset = dio.Dataset(args.input)
    models = [(str(p), load_gaze(p)) for p in args.gaze]
    if args.dry_run:
        return 0
    mcfg = map_config(args)
    ids = _test_ids(dataset)
    clip = max([m.cfg.clip_length for _, m in models] or [1])
    frames = build_gaze_frames([dataset.episode(e) for e in ids], clip, mcfg, truths=[truth_maps(dataset, e, mcfg, args.jobs) for e in ids])
    if len(frames) == 0:
        raise CliError("no evaluation frames with a non-empty ground-truth map")
    mcfg_metrics = MetricConfig(epsilon=args.epsilon)
    predictors = []
    if not args.no_prior:
        prior = mean_truth_map(dataset, dataset.split().train, mcfg, args.jobs)
        predictors.append(("center-prior", lambda i: prior))
    predictors += models
    header = ["model", "all_kl", "all_cc", "all_frames", "driving_kl", "driving_cc", "driving_frames"]
    rows = []
    for name, pred in predictors:
        r = evaluate_gaze(pred, frames, mcfg_metrics)
        d = r.driving
        rows.append(
            [name, _fmt(r.overall.kl), _fmt(r.overall.cc), r.overall.frames]
            + ([_fmt(d.kl), _fmt(d.cc), d.frames] if d else ["-", "-", 0])
        )
    print(f"Driving + traffic frames vs driving frames ({len(frames)} frames)")
    print_table(header, rows)
    if args.tsv:
        write_tsv(args.tsv, header, rows)
    return 0


def cmd_eval_agent(args) -> int:
    from .model.evaluate import evaluate_agent

    dataset = dio.Dataset(args.input)
    agents = [(p, *load_agent(p)) for p in args.agent]
    if args.dry_run:
        return 0
    mcfg = map_config(args)
    split = dataset.split()
    ids = _test_ids(dataset)
    rows = []
    for path, model, meta in agents:
        variant = model.cfg.variant
        ns = argparse.Namespace(maps=meta.get("maps", "predicted"), lam=meta.get("lam", MaskConfig().lam))
        mean_map = mean_truth_map(dataset, split.train, mcfg, args.jobs) if variant == "baseline" else None
        frames = _agent_frames(dataset, ids, variant, ns, mean_map)
        mse, mae = evaluate_agent(model, frames, MetricConfig(task_weights=model.cfg.task_weights))
        rows.append([variant, f"{mse:.5f}", f"{mae:.5f}", len(frames), str(path)])
    header = ["agent", "mse", "mae", "frames", "checkpoint"]
    print("Test-set prediction errors")
    print_table(header, rows)
    if args.tsv:
        write_tsv(args.tsv, header, rows)
    return 0


def cmd_eval_series(args) -> int:
    paths = [series_path(p) for p in args.agent]
    missing = [str(p) for p in paths if not p.is_file()]
    if missing:
        raise CliError(f"no evaluation series for {missing} (train with --eval-every)")
    metas = [read_sidecar(p, "agent") for p in args.agent]
    if args.dry_run:
        return 0
    rows = []
    for meta, p in zip(metas, paths):
        lines = p.read_text().splitlines()[1:]
        for line in lines:
            step, mse, mae = line.split("\t")
            rows.append([meta["config"]["variant"], step, mse, mae])
    header = ["agent", "step", "mse", "mae"]
    write_tsv(args.out, header, rows)
    print(f"wrote {len(rows)} points to {args.out}")
    return 0


# --------------------------------------------------------------------------- parser


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Show defaults, except unset ones and those the help text already explains."""

    def _get_help_string(self, action):
        text = action.help or ""
        if action.default is None or "(default" in text:
            return text
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = argparse.ArgumentParser(prog=PROG, description="Gaze-attention driving pipeline on synthetic data.", formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--dry-run", action="store_true", help="validate arguments and inputs, then exit without computing")
    common.add_argument("--jobs", type=_positive_int, default=1, help="worker threads for per-frame work")

    maps = argparse.ArgumentParser(add_help=False)
    maps.add_argument("--sigma", type=_positive_float, default=None, help="fixation Gaussian std in pixels (default: width / 20)")
    maps.add_argument("--half-window", type=_nonneg_int, default=12, help="fixation window half-width in frames")
    maps.add_argument("--truncate", type=_positive_float, default=4.0, help="Gaussian support radius in std units")

    def add(name, fn, help_, parents=(common,)):
        p = sub.add_parser(name, help=help_, description=help_, parents=list(parents), formatter_class=fmt)
        p.set_defaults(func=fn)
        return p

    p = add("gen", cmd_gen, "generate synthetic episodes")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--frames", type=_positive_int, default=500, help="frames per episode")
    p.add_argument("--episodes", type=_positive_int, default=1, help="number of episodes")
    p.add_argument("--test-episodes", type=_nonneg_int, default=None, help="episodes held out for testing (default: 1 if more than one episode)")
    p.add_argument("--traffic-fraction", type=_unit_float, default=0.25, help="target fraction of traffic-labelled frames")
    p.add_argument("--out", required=True, help="output dataset directory")

    p = add("maps", cmd_maps, "build ground-truth fixation maps from the gaze logs", (common, maps))
    p.add_argument("--in", dest="input", required=True, help="dataset directory")

    p = add("precompute", cmd_precompute, "store gaze-network maps for every frame")
    p.add_argument("--in", dest="input", required=True, help="dataset directory")
    p.add_argument("--gaze", required=True, help="gaze-network checkpoint")

    p = add("mask", cmd_mask, "write attention-masked copies of every frame", (common, maps))
    p.add_argument("--in", dest="input", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory for masked images")
    p.add_argument("--mode", choices=("hard", "soft", "baseline"), required=True, help="mask type")
    p.add_argument("--lambda", dest="lam", type=_unit_float, default=MaskConfig().lam, help="soft-mask floor")
    p.add_argument("--maps", choices=("predicted", "truth"), default="predicted", help="per-frame maps used by hard/soft masks")

    p = add("train-gaze", cmd_train_gaze, "train the intention-branched gaze network", (common, maps))
    p.add_argument("--in", dest="input", required=True, help="dataset directory (train split is used)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--steps", type=_positive_int, default=1500, help="optimizer steps")
    p.add_argument("--batch-size", type=_positive_int, default=8, help="minibatch size")
    p.add_argument("--lr", type=_positive_float, default=0.1, help="SGD learning rate")
    p.add_argument(
        "--shared-warmup-steps",
        type=_nonneg_int,
        default=None,
        help="steps that train one branch on every frame before it is copied to all branches (default: all steps)",
    )
    p.add_argument("--seed", type=int, default=0, help="initialisation and sampling seed")
    p.add_argument("--clip-length", type=_positive_int, default=4, help="frames per input clip")
    p.add_argument("--epsilon", type=_positive_float, default=MetricConfig().epsilon, help="KL regulariser")
    p.add_argument("--second-stream", action="store_true", help="add the frame-difference stream")
    p.add_argument("--two-phase", action="store_true", help="train streams separately before the fused output")
    p.add_argument("--phase1-steps", type=_nonneg_int, default=0, help="steps in the first phase")
    p.add_argument("--no-crop-stream", action="store_true", help="disable the random-crop loss")

    p = add("train-agent", cmd_train_agent, "train a conditional driving agent", (common, maps))
    p.add_argument("--in", dest="input", required=True, help="dataset directory (train split is used)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--variant", choices=("raw", "hard", "soft", "baseline", "dual"), required=True, help="input variant")
    p.add_argument("--maps", choices=("predicted", "truth"), default="predicted", help="per-frame maps used by hard/soft/dual masks")
    p.add_argument("--lambda", dest="lam", type=_unit_float, default=MaskConfig().lam, help="soft-mask floor")
    p.add_argument("--steps", type=_positive_int, default=1500, help="optimizer steps")
    p.add_argument("--batch-size", type=_positive_int, default=32, help="minibatch size")
    p.add_argument("--lr", type=_positive_float, default=0.05, help="SGD learning rate")
    p.add_argument("--seed", type=int, default=0, help="initialisation and sampling seed")
    p.add_argument("--task-weights", type=_weights, default=MetricConfig().task_weights, help="steer,throttle,brake,speed loss weights")
    p.add_argument("--eval-every", type=_nonneg_int, default=0, help="evaluate on the test split every K steps (0: never)")

    p = add("eval-gaze", cmd_eval_gaze, "KL/CC of gaze predictors on all and driving-only test frames", (common, maps))
    p.add_argument("--in", dest="input", required=True, help="dataset directory (test split is used)")
    p.add_argument("--gaze", nargs="*", default=[], help="gaze-network checkpoints")
    p.add_argument("--no-prior", action="store_true", help="omit the center-prior row")
    p.add_argument("--epsilon", type=_positive_float, default=MetricConfig().epsilon, help="KL regulariser")
    p.add_argument("--tsv", default=None, help="also write the table as tab-separated values")

    p = add("eval-agent", cmd_eval_agent, "multitask MSE/MAE of driving agents on the test split", (common, maps))
    p.add_argument("--in", dest="input", required=True, help="dataset directory (test split is used)")
    p.add_argument("--agent", nargs="+", required=True, help="agent checkpoints, one table row each")
    p.add_argument("--tsv", default=None, help="also write the table as tab-separated values")

    p = add("eval-series", cmd_eval_series, "collect metric-vs-step series of agents into one data file")
    p.add_argument("--agent", nargs="+", required=True, help="agent checkpoints trained with --eval-every")
    p.add_argument("--out", required=True, help="output tab-separated data file")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or a usage error (already reported by argparse)
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format=f"{PROG}: %(message)s")
    try:
        code = args.func(args)
        if args.dry_run:
            print(f"{args.command}: configuration ok (dry run)")
        return code
    except (CliError, ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        msg = str(exc) if not isinstance(exc, KeyError) else f"missing key {exc}"
        print(f"{PROG} {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
