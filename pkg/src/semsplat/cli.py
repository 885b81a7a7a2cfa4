"""Command-line entry points: synth, train, render, segment, detect, eval.

Every command takes ``key=value`` overrides after its flags, optionally on top
of a ``--config`` file of the same form.  Exit codes: 0 ok, 2 configuration
error, 3 I/O error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import io
from .eval import box_miou, click_select, detection_recall, query_text
from .pipeline import build_teachers, evaluate
from .raster import Channel, render
from .scene import UNASSIGNED, Camera
from .synth import PerturbConfig, SynthSpec, generate, perturb_for_training, read_benchmark, write_benchmark
from .train import NumericalError, TrainConfig, load_checkpoint, phase1_reconstruct, phase2_bootstrap, save_checkpoint

log = logging.getLogger("semsplat")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERICAL = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


_PATH_KEYS = ("benchmark", "checkpoint", "output")


@dataclass(frozen=True)
class Config:
    """Training and benchmark settings plus run paths; ``seed`` drives both."""

    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    benchmark: str | None = None
    checkpoint: str | None = None
    output: str | None = None
    threads: int | None = None
    deterministic: bool = False

    @classmethod
    def keys(cls) -> list:
        own = [*_PATH_KEYS, "threads", "deterministic"]
        return sorted({*TrainConfig.field_names(), *(f.name for f in fields(SynthSpec)), *own})

    @classmethod
    def parse(cls, text: str = "", overrides=()) -> "Config":
        """Parse ``key=value`` lines (``#`` comments allowed), then apply ``overrides``."""
        pairs = []
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if line:
                pairs.append((_split_pair(line, f"line {n}")))
        pairs += [_split_pair(item, "override") for item in overrides]
        return cls().with_values(dict(pairs))

    def with_values(self, values: dict) -> "Config":
        train_types = {f.name: f.type for f in fields(TrainConfig)}
        synth_types = {f.name: f.type for f in fields(SynthSpec)}
        t_kw, s_kw, own = {}, {}, {}
        for key, raw in values.items():
            known = False
            if key in train_types:
                t_kw[key] = _convert(key, raw, train_types[key])
                known = True
            if key in synth_types:
                s_kw[key] = _convert(key, raw, synth_types[key])
                known = True
            if key in _PATH_KEYS:
                own[key] = raw
                known = True
            elif key == "threads":
                own[key] = _convert(key, raw, "int")
                if own[key] < 1:
                    raise ConfigError("threads must be >= 1")
                known = True
            elif key == "deterministic":
                own[key] = _convert(key, raw, "bool")
                known = True
            if not known:
                raise ConfigError(f"unknown config key {key!r}")
        try:
            return replace(self, train=replace(self.train, **t_kw), synth=replace(self.synth, **s_kw), **own)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def require(self, key: str) -> Path:
        value = getattr(self, key)
        if not value:
            raise ConfigError(f"missing required setting {key!r}")
        return Path(value)


def _split_pair(item: str, where: str):
    if "=" not in item:
        raise ConfigError(f"{where}: expected key=value, got {item!r}")
    k, v = item.split("=", 1)
    return k.strip(), v.strip()


def _convert(key: str, raw, kind: str):
    if not isinstance(raw, str):
        return raw
    try:
        if kind == "bool":
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind.startswith("float"):
            if raw.lower() == "none" and "None" in kind:
                return None
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    raise ConfigError(f"{key}: unsupported type {kind}")


def set_threads(threads: int | None, deterministic: bool) -> None:
    import numba
    import torch

    n = 1 if deterministic else threads
    if n is not None:
        torch.set_num_threads(n)
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    if deterministic:
        torch.use_deterministic_algorithms(True)


# ------------------------------------------------------------------ commands


def cmd_synth(cfg: Config) -> Path:
    out = cfg.require("output")
    scene, truth = generate(cfg.synth, cfg.train.feature_dim)
    start = perturb_for_training(scene, truth, PerturbConfig(seed=cfg.synth.seed), cfg.synth.object_radius)
    write_benchmark(out, cfg.synth, scene, truth, start)
    print(f"wrote benchmark with {len(scene)} Gaussians, {len(scene.cameras)} train views to {out}")
    return out


def cmd_train(cfg: Config, phase: str = "all") -> Path:
    bench = cfg.require("benchmark")
    ckpt = cfg.require("checkpoint")
    spec, _, start, truth = read_benchmark(bench)
    info = {"benchmark": str(bench.resolve())}
    if phase in ("1", "all"):
        scene, rep = phase1_reconstruct(start, cfg.train, (truth.test_cameras, truth.test_images))
        info["psnr"] = repr(round(float(rep.psnr), 4))
        save_checkpoint(ckpt, scene, optimizer_state={f"phase1_{k}": v for k, v in rep.optimizer_state.items()}, info=info)
        (Path(ckpt) / "phase1_loss.txt").write_text("".join(f"{x!r}\n" for x in rep.losses))
        print(f"phase 1: held-out PSNR {rep.psnr:.2f} dB")
    if phase in ("2", "all"):
        scene, _, _, prev = load_checkpoint(ckpt)
        info = {**prev, **info}
        teachers = build_teachers(truth, spec)
        scene, res = phase2_bootstrap(scene, teachers, cfg.train, log_file=Path(ckpt) / "train_log.jsonl")
        info["n_groups"] = res.cluster.n_groups if res.cluster is not None else 0
        save_checkpoint(
            ckpt, scene, res.head, res.cluster, {f"phase2_{k}": v for k, v in res.optimizer_state.items()}, info
        )
        print(f"phase 2: {info['n_groups']} groups")
    return ckpt


def _load(cfg: Config):
    ckpt = cfg.require("checkpoint")
    scene, head, cluster, info = load_checkpoint(ckpt)
    bench = cfg.benchmark or info.get("benchmark")
    if not bench:
        raise ConfigError("missing required setting 'benchmark'")
    spec, _, _, truth = read_benchmark(bench)
    return scene, head, cluster, info, truth


def _need_cluster(cluster):
    if cluster is None:
        raise ConfigError("checkpoint has no clustering; run train --phase 2 first")
    return cluster


def _camera(scene, truth, view: int | None, test: bool, pose: str | None) -> Camera:
    if pose is not None:
        try:
            vals = [float(x) for x in pose.split(",")]
        except ValueError:
            vals = []
        if len(vals) != 6:
            raise ConfigError("--pose needs eye_x,eye_y,eye_z,target_x,target_y,target_z")
        ref = scene.cameras[0]
        fov = float(np.degrees(2 * np.arctan(0.5 * ref.width / ref.fx)))
        return Camera.look_at(vals[:3], vals[3:], width=ref.width, height=ref.height, fov_deg=fov)
    cams = truth.test_cameras if test else scene.cameras
    k = 0 if view is None else view
    if not 0 <= k < len(cams):
        raise ConfigError(f"view {k} out of range (0..{len(cams) - 1})")
    return cams[k]


def cmd_render(cfg: Config, view=None, test=False, pose=None, channels="color") -> Path:
    scene, head, cluster, _, truth = _load(cfg)
    out = cfg.require("output")
    out.mkdir(parents=True, exist_ok=True)
    names = [c.strip().upper() for c in channels.split(",") if c.strip()]
    try:
        flags = [Channel[n] for n in names]
    except KeyError:
        raise ConfigError(f"unknown channel in {channels!r}; choose from color, feature, id, depth") from None
    ch = Channel(0)
    for f in flags:
        ch |= f
    cam = _camera(scene, truth, view, test, pose)
    n_groups = cluster.n_groups if cluster is not None else None
    r = render(scene, cam, ch, n_groups=n_groups)
    if r.color is not None:
        io.write_ppm(out / "color.ppm", r.color)
        io.save_tensor(out / "color.tnsr", r.color.astype(np.float32))
    if r.depth is not None:
        io.save_tensor(out / "depth.tnsr", r.depth.astype(np.float32))
    if r.feature is not None:
        io.save_tensor(out / "feature.tnsr", r.feature.astype(np.float32))
        if head is not None:
            io.save_tensor(out / "feature_projected.tnsr", head.project_numpy(r.feature).astype(np.float32))
    if r.id_map is not None:
        io.save_tensor(out / "id_map.tnsr", r.id_map.astype(np.int64))
        io.write_pgm(out / "id_map.pgm", np.where(r.id_map == UNASSIGNED, 0, 1 + r.id_map) / max(1, (n_groups or 0) + 1))
    print(f"rendered {', '.join(n.lower() for n in names)} to {out}")
    return out


def cmd_segment(cfg: Config, query: str | None = None, click: str | None = None, view: int = 0) -> dict:
    scene, head, cluster, _, truth = _load(cfg)
    cluster = _need_cluster(cluster)
    out = cfg.require("output")
    out.mkdir(parents=True, exist_ok=True)
    cam = _camera(scene, truth, view, True, None)
    if (query is None) == (click is None):
        raise ConfigError("segment needs exactly one of --query or --click")
    if query is not None:
        if query not in truth.class_names:
            raise ConfigError(f"unknown class {query!r}; valid names: {', '.join(truth.class_names)}")
        emb = truth.class_embeddings[truth.class_names.index(query)]
        res = query_text(scene, cluster, emb, head.project_numpy if head is not None else None, cam=cam)
    else:
        try:
            u, v = (int(x) for x in click.split(","))
        except ValueError:
            raise ConfigError(f"--click expects u,v, got {click!r}") from None
        try:
            res = click_select(scene, cluster, cam, (u, v))
        except IndexError as exc:
            raise ConfigError(str(exc)) from None
    mask = res.mask if res.mask is not None else np.zeros((cam.height, cam.width), bool)
    io.write_pgm(out / "mask.pgm", mask.astype(np.float64))
    report = {
        "query": query if query is not None else f"click {click}",
        "view": view,
        "group": res.group_id,
        "scores": [round(float(s), 6) for s in res.scores],
        "pixels": int(mask.sum()),
    }
    (out / "segment.txt").write_text(json.dumps(report, sort_keys=True) + "\n")
    print(json.dumps(report, sort_keys=True))
    return report


def cmd_detect(cfg: Config, queries: str | None = None) -> dict:
    scene, head, cluster, _, truth = _load(cfg)
    cluster = _need_cluster(cluster)
    names = truth.class_names if not queries else [q.strip() for q in queries.split(",") if q.strip()]
    bad = [q for q in names if q not in truth.class_names]
    if bad:
        raise ConfigError(f"unknown class {bad[0]!r}; valid names: {', '.join(truth.class_names)}")
    project = head.project_numpy if head is not None else None
    preds, gts, lines = {}, {}, []
    for q in names:
        k = truth.class_names.index(q)
        res = query_text(scene, cluster, truth.class_embeddings[k], project)
        preds[q], gts[q] = res.box, truth.box(k)
        corners = " ".join(f"{x:.6f}" for x in res.box.as_array().ravel()) if res.box is not None else "none"
        lines.append(f"{q} group={res.group_id} box={corners}")
    summary = {
        "box_miou": round(box_miou(preds, gts), 6),
        "recall_25": round(detection_recall(preds, gts, 0.25), 6),
        "recall_50": round(detection_recall(preds, gts, 0.5), 6),
    }
    lines += [f"{k}={v!r}" for k, v in summary.items()]
    text = "\n".join(lines) + "\n"
    if cfg.output:
        Path(cfg.output).parent.mkdir(parents=True, exist_ok=True)
        Path(cfg.output).write_text(text)
    sys.stdout.write(text)
    return summary


def cmd_eval(cfg: Config) -> dict:
    scene, head, cluster, info, truth = _load(cfg)
    report = evaluate(scene, cluster, head, truth)
    if "psnr" in info:
        report.summary["psnr"] = float(info["psnr"])
    text = report.to_text()
    if cfg.output:
        Path(cfg.output).parent.mkdir(parents=True, exist_ok=True)
        Path(cfg.output).write_text(text)
    for k in sorted(report.summary):
        print(f"{k}={report.summary[k]!r}")
    return report.summary


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semsplat", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="key=value settings file")
    p.add_argument("--threads", type=int, help="worker threads for torch and numba")
    p.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible run")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("overrides", nargs="*", metavar="key=value")
        return sp

    sp = add("synth", "generate a synthetic benchmark directory")
    sp.add_argument("--out", dest="output")
    sp = add("train", "train a checkpoint on a benchmark")
    sp.add_argument("--bench", dest="benchmark")
    sp.add_argument("--ckpt", dest="checkpoint")
    sp.add_argument("--phase", choices=["1", "2", "all"], default="all")
    for name, help_text in (("render", "render channels of a checkpoint"), ("segment", "2D mask for a class or a click"),
                            ("detect", "3D boxes for class queries"), ("eval", "full metric report")):
        sp = add(name, help_text)
        sp.add_argument("--ckpt", dest="checkpoint")
        sp.add_argument("--bench", dest="benchmark")
        sp.add_argument("--out", dest="output")
        if name == "render":
            sp.add_argument("--view", type=int)
            sp.add_argument("--test", action="store_true", help="index held-out cameras instead of training ones")
            sp.add_argument("--pose", help="eye_x,eye_y,eye_z,target_x,target_y,target_z")
            sp.add_argument("--channels", default="color")
        elif name == "segment":
            sp.add_argument("--query")
            sp.add_argument("--click", help="u,v")
            sp.add_argument("--view", type=int, default=0, help="held-out view index")
        elif name == "detect":
            sp.add_argument("--queries", help="comma-separated class names (default: all)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        text = Path(args.config).read_text() if args.config else ""
        cfg = Config.parse(text, args.overrides)
        flags = {k: getattr(args, k) for k in _PATH_KEYS if getattr(args, k, None) is not None}
        if args.threads is not None:
            flags["threads"] = args.threads
        if args.deterministic:
            flags["deterministic"] = True
        cfg = cfg.with_values(flags)
        set_threads(cfg.threads, cfg.deterministic)
        if args.command == "synth":
            cmd_synth(cfg)
        elif args.command == "train":
            cmd_train(cfg, args.phase)
        elif args.command == "render":
            cmd_render(cfg, args.view, args.test, args.pose, args.channels)
        elif args.command == "segment":
            cmd_segment(cfg, args.query, args.click, args.view)
        elif args.command == "detect":
            cmd_detect(cfg, args.queries)
        else:
            cmd_eval(cfg)
    except ConfigError as exc:
        print(f"semsplat: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, io.FormatError) as exc:
        print(f"semsplat: io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericalError, FloatingPointError) as exc:
        print(f"semsplat: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
