"""Operator command line.

Subcommands: `dataset make|inspect`, `train med|ted|mtdm`,
`sample t2m|m2t|uncond|joint|vary`, `eval`, `bench interactions`, `render`.
Option precedence everywhere is flags > config file > built-in defaults;
the config file is one JSON object whose flat keys mirror long flag names,
plus an optional "pipeline" section with model/training settings.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Every command
that writes artifacts drops exactly one run_manifest.json next to them.
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import data, nn, pipeline
from .checkpoint import save_checkpoint
from .metrics import train_retrieval_extractor
from .mtdm import INTERACTIONS, MtdmConfig, profile_config
from .sampler import (GuidanceConfig, sample_joint, sample_motion_to_text,
                      sample_text_to_motion, sample_unconditional, variation)

COLUMNS = ("x", "y", "vx", "vy", "heading_sin", "heading_cos",
           "gait_sin", "gait_cos")
MANIFEST_NAME = "run_manifest.json"


class UsageError(Exception):
    """Operator mistake: bad flags, missing prerequisite artifacts."""


# ---------------------------------------------------------------------------
# run manifest


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    checkpoint_hash: str | None
    git_describe: str
    wall_time: float


def describe_tree() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10,
                             cwd=Path(__file__).parent)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def write_manifest(out_dir, command: str, config: dict, seed,
                   checkpoint=None, started: float = 0.0) -> None:
    manifest = RunManifest(
        command=command,
        config=config,
        seed=seed,
        checkpoint_hash=pipeline.file_hash(checkpoint) if checkpoint else None,
        git_describe=describe_tree(),
        wall_time=round(time.monotonic() - started, 3),
    )
    path = Path(out_dir) / MANIFEST_NAME
    path.write_text(json.dumps(asdict(manifest), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# artifact formats


def save_motion_csv(path, clip) -> None:
    clip = np.asarray(clip, dtype=np.float64)
    lines = ["# " + ",".join(COLUMNS)]
    for row in clip:
        lines.append(",".join(format(v, ".17g") for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_motion_csv(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"no motion file at {path}")
    clip = np.loadtxt(path, delimiter=",", comments="#", dtype=np.float64,
                      ndmin=2)
    if clip.shape[1] != len(COLUMNS):
        raise UsageError(
            f"{path} has {clip.shape[1]} columns, expected {len(COLUMNS)}")
    return clip


def _gradient_color(t: float) -> str:
    """Early frames cool blue, late frames warm red."""
    a, b = (31, 119, 180), (214, 39, 40)
    rgb = tuple(round(a[i] + (b[i] - a[i]) * t) for i in range(3))
    return f"rgb({rgb[0]},{rgb[1]},{rgb[2]})"


def render_svg(clip, path, caption=None) -> None:
    """Trajectory plot: time-gradient polyline, start circle, end square.

    Pure text generation with fixed float formatting, so identical input
    yields identical bytes.
    """
    clip = np.asarray(clip, dtype=np.float64)
    if clip.ndim != 2 or clip.shape[1] < 2 or len(clip) < 2:
        raise ValueError(f"render expects a (frames, >=2) clip, got {clip.shape}")
    x, y = clip[:, 0], clip[:, 1]
    span = max(float(x.max() - x.min()), float(y.max() - y.min()), 1e-9)
    # shared scale keeps the geometry undistorted
    def sx(v):
        return 30.0 + (v - float(x.min())) * 420.0 / span

    def sy(v):
        return 450.0 - (v - float(y.min())) * 420.0 / span

    fmt = lambda v: format(v, ".3f")
    parts = ['<svg xmlns="http://www.w3.org/2000/svg" width="480" height="480" '
             'viewBox="0 0 480 480">',
             '<rect width="480" height="480" fill="white"/>']
    if caption:
        safe = (caption.replace("&", "&amp;").replace("<", "&lt;")
                .replace(">", "&gt;"))
        parts.append(f'<text x="240" y="20" font-size="14" '
                     f'text-anchor="middle" font-family="monospace">{safe}</text>')
    n = len(x)
    for i in range(n - 1):
        color = _gradient_color(i / max(n - 2, 1))
        parts.append(f'<line x1="{fmt(sx(x[i]))}" y1="{fmt(sy(y[i]))}" '
                     f'x2="{fmt(sx(x[i + 1]))}" y2="{fmt(sy(y[i + 1]))}" '
                     f'stroke="{color}" stroke-width="2" stroke-linecap="round"/>')
    parts.append(f'<circle cx="{fmt(sx(x[0]))}" cy="{fmt(sy(y[0]))}" r="6" '
                 'fill="none" stroke="black" stroke-width="2"/>')
    parts.append(f'<rect x="{fmt(sx(x[-1]) - 5)}" y="{fmt(sy(y[-1]) - 5)}" '
                 'width="10" height="10" fill="black"/>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


# ---------------------------------------------------------------------------
# configuration plumbing


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a single JSON object")
    return cfg


def resolve(args, file_cfg: dict, key: str, default):
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    if key in file_cfg:
        return file_cfg[key]
    return default


def resolved_pipeline(file_cfg: dict) -> pipeline.PipelineConfig:
    try:
        return pipeline.pipeline_from_dict(file_cfg.get("pipeline", {}))
    except (ValueError, TypeError) as exc:
        raise UsageError(f"bad pipeline config: {exc}") from None


def _apply_train_flags(cfg: pipeline.PipelineConfig, section: str, args,
                       file_cfg: dict) -> pipeline.PipelineConfig:
    updates = {}
    for key, cast in (("epochs", int), ("lr", float), ("batch", int),
                      ("seed", int)):
        value = resolve(args, file_cfg, key, None)
        if value is not None:
            updates[key] = cast(value)
    if not updates:
        return cfg
    return replace(cfg, **{section: replace(getattr(cfg, section), **updates)})


def _out_dir(args, file_cfg: dict, default: str) -> Path:
    out = Path(resolve(args, file_cfg, "out", default))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_corpus_or_die(data_dir) -> data.Corpus:
    root = Path(data_dir)
    if not (root / "data.bin").exists():
        raise UsageError(f"no dataset at {root}; "
                         f"run `mote dataset make --out {root}` first")
    return data.load_corpus(root)


def _load_system_or_die(path):
    if path is None:
        raise UsageError("no system checkpoint given; pass --checkpoint "
                         "(produced by `mote train mtdm`)")
    path = Path(path)
    if not path.exists():
        raise UsageError(f"no checkpoint at {path}; run `mote train mtdm` first")
    return pipeline.load_system(path)


# ---------------------------------------------------------------------------
# subcommands


def cmd_dataset_make(args, file_cfg: dict) -> int:
    started = time.monotonic()
    seed = int(resolve(args, file_cfg, "seed", 0))
    per_combo = int(resolve(args, file_cfg, "seeds_per_combo", 35))
    out = _out_dir(args, file_cfg, "dataset")
    corpus = data.build_corpus(per_combo, seed)
    data.save_corpus(corpus, out)
    summary = {"items": len(corpus), "train": len(corpus.indices("train")),
               "test": len(corpus.indices("test")), "vocab": len(corpus.vocab),
               "out": str(out)}
    write_manifest(out, "dataset make",
                   {"seeds_per_combo": per_combo, "corpus_seed": seed},
                   seed, started=started)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_dataset_inspect(args, file_cfg: dict) -> int:
    root = Path(resolve(args, file_cfg, "data", "dataset"))
    corpus = _load_corpus_or_die(root)
    lengths = [len(c) for c in corpus.clips]
    summary = {
        "items": len(corpus),
        "train": len(corpus.indices("train")),
        "test": len(corpus.indices("test")),
        "vocab": len(corpus.vocab),
        "feature_dim": int(corpus.clips[0].shape[1]),
        "frames_min": int(min(lengths)),
        "frames_max": int(max(lengths)),
        "unique_captions": len(set(corpus.captions)),
        "data_hash": pipeline.file_hash(root / "data.bin"),
    }
    print(json.dumps(summary, indent=2))
    return 0


def cmd_train(args, file_cfg: dict) -> int:
    started = time.monotonic()
    kind = args.kind
    corpus = _load_corpus_or_die(resolve(args, file_cfg, "data", "dataset"))
    out = _out_dir(args, file_cfg, f"runs/train-{kind}")
    cfg = resolved_pipeline(file_cfg)
    cfg = _apply_train_flags(cfg, f"{kind}_train", args, file_cfg)
    ckpt = out / f"{'system' if kind == 'mtdm' else kind}.mote"
    with open(out / "train_log.jsonl", "w") as log:
        if kind == "med":
            pipeline.train_med_model(cfg, corpus, ckpt, log_file=log)
        elif kind == "ted":
            pipeline.train_ted_model(cfg, corpus, ckpt, log_file=log)
        else:
            med_path = resolve(args, file_cfg, "med", None)
            ted_path = resolve(args, file_cfg, "ted", None)
            if med_path is None or ted_path is None:
                raise UsageError("stage 2 needs frozen codecs: pass --med and "
                                 "--ted (run `mote train med` / `mote train "
                                 "ted` first)")
            for p in (med_path, ted_path):
                if not Path(p).exists():
                    raise UsageError(f"no checkpoint at {p}")
            med = pipeline.load_med(med_path)
            ted = pipeline.load_ted(ted_path)
            try:
                cfg = replace(cfg, med=med.cfg, ted=ted.cfg)
            except ValueError as exc:
                raise UsageError(f"codec does not fit the denoiser: {exc}") from None
            pipeline.build_system(cfg, corpus, med, ted, ckpt, log_file=log)
    seed = getattr(cfg, f"{kind}_train").seed
    write_manifest(out, f"train {kind}", cfg.to_dict(), seed,
                   checkpoint=ckpt, started=started)
    print(json.dumps({"checkpoint": str(ckpt),
                      "log": str(out / "train_log.jsonl")}, indent=2))
    return 0


def _sample_common(args, file_cfg: dict):
    ckpt = resolve(args, file_cfg, "checkpoint", None)
    system = _load_system_or_die(ckpt)
    seed = int(resolve(args, file_cfg, "seed", 0))
    steps = int(resolve(args, file_cfg, "steps", 100))
    return system, ckpt, seed, steps


def cmd_sample(args, file_cfg: dict) -> int:
    started = time.monotonic()
    task = args.task
    system, ckpt, seed, steps = _sample_common(args, file_cfg)
    out = _out_dir(args, file_cfg, f"runs/sample-{task}")
    record = {"task": task, "steps": steps}
    files = []

    if task == "t2m":
        text = resolve(args, file_cfg, "text", None)
        if text is None:
            raise UsageError("sample t2m needs --text")
        frames = int(resolve(args, file_cfg, "frames", 64))
        w = float(resolve(args, file_cfg, "guidance", 7.5))
        clip = sample_text_to_motion(
            system, [text], frames, GuidanceConfig(w_m=w, steps=steps, seed=seed))[0]
        save_motion_csv(out / "motion.csv", clip)
        render_svg(clip, out / "trajectory.svg", caption=text)
        files = ["motion.csv", "trajectory.svg"]
        record.update(text=text, frames=frames, guidance=w)
    elif task == "m2t":
        clip = load_motion_csv(_require(args, file_cfg, "motion",
                                        "sample m2t needs --motion"))
        w = float(resolve(args, file_cfg, "guidance", 7.0))
        caption = sample_motion_to_text(
            system, [clip], GuidanceConfig(w_s=w, steps=steps, seed=seed))[0]
        (out / "caption.txt").write_text(caption + "\n")
        files = ["caption.txt"]
        record.update(guidance=w)
    elif task == "uncond":
        modality = resolve(args, file_cfg, "modality", "motion")
        count = int(resolve(args, file_cfg, "count", 1))
        frames = int(resolve(args, file_cfg, "frames", 64))
        outputs = sample_unconditional(system, modality, count, frames,
                                       GuidanceConfig(steps=steps, seed=seed))
        if modality == "motion":
            for i, clip in enumerate(outputs):
                save_motion_csv(out / f"motion_{i:03d}.csv", clip)
                render_svg(clip, out / f"trajectory_{i:03d}.svg")
                files += [f"motion_{i:03d}.csv", f"trajectory_{i:03d}.svg"]
        else:
            (out / "captions.txt").write_text("\n".join(outputs) + "\n")
            files = ["captions.txt"]
        record.update(modality=modality, count=count)
    elif task == "joint":
        count = int(resolve(args, file_cfg, "count", 1))
        frames = int(resolve(args, file_cfg, "frames", 64))
        pairs = sample_joint(system, count, frames,
                             GuidanceConfig(steps=steps, seed=seed))
        captions = []
        for i, (clip, caption) in enumerate(pairs):
            save_motion_csv(out / f"joint_{i:03d}.csv", clip)
            render_svg(clip, out / f"trajectory_{i:03d}.svg", caption=caption)
            captions.append(caption)
            files += [f"joint_{i:03d}.csv", f"trajectory_{i:03d}.svg"]
        (out / "captions.txt").write_text("\n".join(captions) + "\n")
        files.append("captions.txt")
        record.update(count=count)
    else:
        strength = float(resolve(args, file_cfg, "strength", 0.5))
        text = resolve(args, file_cfg, "text", None)
        motion = resolve(args, file_cfg, "motion", None)
        if (text is None) == (motion is None):
            raise UsageError("sample vary needs exactly one of --text/--motion")
        g = GuidanceConfig(steps=steps, seed=seed)
        if motion is not None:
            varied = variation(system, load_motion_csv(motion), strength, g)
            save_motion_csv(out / "motion.csv", varied)
            render_svg(varied, out / "trajectory.svg")
            files = ["motion.csv", "trajectory.svg"]
        else:
            varied = variation(system, text, strength, g)
            (out / "caption.txt").write_text(varied + "\n")
            files = ["caption.txt"]
        record.update(strength=strength, text=text, motion=motion)

    write_manifest(out, f"sample {task}", record, seed,
                   checkpoint=ckpt, started=started)
    print(json.dumps({"out": str(out), "files": files}, indent=2))
    return 0


def _require(args, file_cfg: dict, key: str, message: str):
    value = resolve(args, file_cfg, key, None)
    if value is None:
        raise UsageError(message)
    return value


def cmd_eval(args, file_cfg: dict) -> int:
    started = time.monotonic()
    system, ckpt, seed, steps = _sample_common(args, file_cfg)
    corpus = _load_corpus_or_die(resolve(args, file_cfg, "data", "dataset"))
    out = _out_dir(args, file_cfg, "runs/eval")
    n = int(resolve(args, file_cfg, "n", 160))
    gallery = int(resolve(args, file_cfg, "gallery", 32))
    extractor_path = resolve(args, file_cfg, "extractor", None)
    cfg = resolved_pipeline(file_cfg)
    if extractor_path is None:
        idx = corpus.indices("train")
        extractor = train_retrieval_extractor(
            [corpus.clips[i] for i in idx], [corpus.captions[i] for i in idx],
            corpus.vocab, corpus.mean, corpus.std, cfg.extractor)
        save_checkpoint(out / "extractor.mote",
                        {"extractor": asdict(cfg.extractor)},
                        nn.state_dict(extractor))
    else:
        extractor = pipeline.load_extractor(extractor_path, corpus)
    report = pipeline.retrieval_report(system, corpus, extractor, n=n,
                                       steps=steps, seed=seed,
                                       gallery_size=gallery)
    rp, gt = report["r_precision"], report["r_precision_ground_truth"]
    text = report["text_metrics"]
    payload = {
        "r_at_1": rp["top1"], "r_at_2": rp["top2"], "r_at_3": rp["top3"],
        "ci95": rp["ci95"],
        "ground_truth": {"r_at_1": gt["top1"], "r_at_2": gt["top2"],
                         "r_at_3": gt["top3"], "ci95": gt["ci95"]},
        "fid": report["fid"], "mm_dist": report["mm_dist"],
        "m_modality": report["m_modality"],
        "bleu1": text["bleu1"], "bleu4": text["bleu4"],
        "rougeL": text["rougeL"], "cider": text["cider"],
        "n": report["n"],
    }
    (out / "eval.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "eval", {"n": n, "steps": steps, "gallery": gallery},
                   seed, checkpoint=ckpt, started=started)
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def cmd_bench(args, file_cfg: dict) -> int:
    dim = int(resolve(args, file_cfg, "dim", 768))
    ffn = int(resolve(args, file_cfg, "ffn", 1024))
    blocks = int(resolve(args, file_cfg, "blocks", 7))
    heads = resolve(args, file_cfg, "heads", None)
    if heads is None:
        heads = next((h for h in (12, 8, 4, 2, 1) if dim % h == 0))
    heads = int(heads)
    counts = {}
    for kind in INTERACTIONS:
        try:
            cfg = MtdmConfig(model_dim=dim, heads=heads, ffn_dim=ffn,
                             blocks=blocks, interaction=kind,
                             motion_latent_dim=256, text_latent_dim=768)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        counts[kind] = profile_config(cfg)["params"]
    payload = {"model_dim": dim, "ffn_dim": ffn, "blocks": blocks,
               "heads": heads, "params": counts,
               "ordering": sorted(counts, key=counts.get)}
    print(json.dumps(payload, indent=2))
    if getattr(args, "out", None) is not None:
        started = time.monotonic()
        out = _out_dir(args, file_cfg, "runs/bench")
        (out / "bench.json").write_text(json.dumps(payload, indent=2) + "\n")
        write_manifest(out, "bench interactions", payload, None,
                       started=started)
    return 0


def cmd_render(args, file_cfg: dict) -> int:
    started = time.monotonic()
    clip = load_motion_csv(_require(args, file_cfg, "motion",
                                    "render needs --motion"))
    caption = resolve(args, file_cfg, "caption", None)
    out = _out_dir(args, file_cfg, "runs/render")
    render_svg(clip, out / "trajectory.svg", caption=caption)
    write_manifest(out, "render", {"caption": caption}, None, started=started)
    print(json.dumps({"out": str(out / "trajectory.svg")}, indent=2))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="master RNG seed")
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", help="output directory")

    parser = argparse.ArgumentParser(
        prog="mote",
        description="Unified motion-text latent diffusion at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="synthetic corpus tools")
    ds_sub = ds.add_subparsers(dest="action", required=True)
    mk = ds_sub.add_parser("make", parents=[common],
                           help="generate and save the paired corpus")
    mk.add_argument("--seeds-per-combo", type=int, dest="seeds_per_combo")
    mk.set_defaults(func=cmd_dataset_make)
    ins = ds_sub.add_parser("inspect", parents=[common],
                            help="summarize a saved corpus")
    ins.add_argument("--data", help="corpus directory")
    ins.set_defaults(func=cmd_dataset_inspect)

    tr = sub.add_parser("train", help="stage 1 and stage 2 training")
    tr_sub = tr.add_subparsers(dest="kind", required=True)
    for kind, blurb in (("med", "motion codec"), ("ted", "text codec"),
                        ("mtdm", "unified denoiser over frozen codecs")):
        t = tr_sub.add_parser(kind, parents=[common], help=blurb)
        t.add_argument("--data", help="corpus directory")
        t.add_argument("--epochs", type=int)
        t.add_argument("--lr", type=float)
        t.add_argument("--batch", type=int)
        if kind == "mtdm":
            t.add_argument("--med", help="trained motion codec checkpoint")
            t.add_argument("--ted", help="trained text codec checkpoint")
        t.set_defaults(func=cmd_train)

    sp = sub.add_parser("sample", help="generation tasks")
    sp_sub = sp.add_subparsers(dest="task", required=True)
    for task, blurb in (("t2m", "text to motion"), ("m2t", "motion to text"),
                        ("uncond", "unconditional"), ("joint", "joint pair"),
                        ("vary", "variation of an existing item")):
        s = sp_sub.add_parser(task, parents=[common], help=blurb)
        s.add_argument("--checkpoint", help="system checkpoint from train mtdm")
        s.add_argument("--steps", type=int, help="denoising steps")
        if task in ("t2m", "vary"):
            s.add_argument("--text", help="caption prompt")
        if task in ("m2t", "vary"):
            s.add_argument("--motion", help="motion CSV file")
        if task in ("t2m", "uncond", "joint"):
            s.add_argument("--frames", type=int, help="output clip length")
        if task in ("t2m", "m2t"):
            s.add_argument("--guidance", type=float, help="guidance weight")
        if task in ("uncond", "joint"):
            s.add_argument("--count", type=int, help="number of samples")
        if task == "uncond":
            s.add_argument("--modality", choices=("motion", "text"))
        if task == "vary":
            s.add_argument("--strength", type=float,
                           help="noising strength in (0, 1)")
        s.set_defaults(func=cmd_sample)

    ev = sub.add_parser("eval", parents=[common],
                        help="quantitative report on held-out data")
    ev.add_argument("--checkpoint", help="system checkpoint")
    ev.add_argument("--data", help="corpus directory")
    ev.add_argument("--extractor", help="retrieval extractor checkpoint")
    ev.add_argument("--steps", type=int)
    ev.add_argument("--n", type=int, help="held-out items to score")
    ev.add_argument("--gallery", type=int, help="retrieval gallery size")
    ev.set_defaults(func=cmd_eval)

    be = sub.add_parser("bench", help="profiling")
    be_sub = be.add_subparsers(dest="target", required=True)
    bi = be_sub.add_parser("interactions", parents=[common],
                           help="parameter counts of the coupling variants")
    bi.add_argument("--dim", type=int, help="model width")
    bi.add_argument("--ffn", type=int, help="feed-forward width")
    bi.add_argument("--blocks", type=int, help="block count (odd)")
    bi.add_argument("--heads", type=int, help="attention heads")
    bi.set_defaults(func=cmd_bench)

    re = sub.add_parser("render", parents=[common],
                        help="trajectory SVG from a motion CSV")
    re.add_argument("--motion", help="motion CSV file")
    re.add_argument("--caption", help="annotation text")
    re.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        file_cfg = load_config(args.config)
        return args.func(args, file_cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
