"""Synthetic paired motion-text corpus with an analytic ground-truth probe.

Each clip is a 2-D point trajectory sampled at 20 fps with eight per-frame
features: position (x, y), velocity (vx, vy), heading (sin, cos), and gait
phase (sin, cos).  Every clip is generated from a small attribute tuple
(action, direction, speed) plus a seed, and every caption is rendered from
one of three fixed paraphrase templates over the same attributes.  Because
the attributes are recoverable from the raw features by closed-form rules
(``attribute_probe``) and from the caption by keyword rules
(``parse_caption``), generation quality can be verified exactly without a
learned critic.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FPS = 20.0
DT = 1.0 / FPS
FEATURE_DIM = 8
FRAME_RANGE = (32, 128)
NOISE_SIGMA = 0.02

ACTIONS = ("walk-line", "circle", "zigzag", "stop-start")
DIRECTIONS = ("right", "forward", "left", "backward")
SPEEDS = ("slow", "medium", "fast")

SPEED_VALUE = {"slow": 0.4, "medium": 0.9, "fast": 1.6}
SPEED_EDGES = (0.62, 1.2)  # band boundaries for the probe
DIR_ANGLE = {"right": 0.0, "forward": np.pi / 2, "left": np.pi, "backward": 3 * np.pi / 2}

STOP_SPEED = 0.2        # below this a frame counts as stopped
STOP_FRAC_MIN = 0.15    # stopped fraction above this means stop-start
TURN_NET_MIN = np.pi    # net turn above this means circle
TURN_RATE_MIN = 0.075   # mean |heading delta| per frame above this means zigzag

ZIG_AMPLITUDE = np.deg2rad(40.0)
ZIG_SEGMENT = 8         # frames per zigzag leg; short legs keep the
                        # per-frame turn-rate statistic high even at 32 frames
MOVE_FRAMES = 24        # stop-start duty cycle
STOP_FRAMES = 12
PHASE_STRIDE = 8.0      # distance per gait cycle; long enough that phase
                        # stays low-frequency (fast clips ~0.06 rad/frame)
                        # yet still wraps within a long fast clip

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("[pad]", "[bos]", "[eos]", "[unk]")
MAX_TOKENS = 24

SPEED_PHRASE = {"slow": "slowly", "medium": "at a medium pace", "fast": "quickly"}

TEMPLATES = {
    "walk-line": (
        "a point moves {d} {s}",
        "the point travels {d} {s}",
        "moving {s} the point heads {d}",
    ),
    "circle": (
        "a point moves in a circle starting {d} {s}",
        "the point travels {s} in a circle beginning {d}",
        "tracing a circle the point starts {d} and moves {s}",
    ),
    "zigzag": (
        "a point zigzags {d} {s}",
        "the point moves {d} in a zigzag {s}",
        "zigzagging {s} the point heads {d}",
    ),
    "stop-start": (
        "a point moves {d} {s} stopping now and then",
        "the point travels {d} {s} with pauses",
        "stopping and starting the point heads {d} {s}",
    ),
}


@dataclass(frozen=True)
class MotionSpec:
    action: str
    direction: str
    speed: str
    frames: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.action not in ACTIONS:
            raise ValueError(f"unknown action {self.action!r}")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {self.direction!r}")
        if self.speed not in SPEEDS:
            raise ValueError(f"unknown speed {self.speed!r}")
        if not (FRAME_RANGE[0] <= self.frames <= FRAME_RANGE[1]):
            raise ValueError(f"frames must be in {FRAME_RANGE}, got {self.frames}")

    @property
    def attrs(self):
        return (self.action, self.direction, self.speed)


def _headings_and_speeds(spec: MotionSpec):
    n = spec.frames
    base = DIR_ANGLE[spec.direction]
    v = SPEED_VALUE[spec.speed]
    speeds = np.full(n, v)
    if spec.action == "walk-line":
        headings = np.full(n, base)
    elif spec.action == "circle":
        # one full revolution split over exactly n velocity segments, so the
        # integrated polygon closes on itself up to fp rounding
        headings = base + 2.0 * np.pi * np.arange(n) / n
    elif spec.action == "zigzag":
        legs = (np.arange(n) // ZIG_SEGMENT) % 2
        headings = base + ZIG_AMPLITUDE * np.where(legs == 0, 1.0, -1.0)
    else:  # stop-start
        headings = np.full(n, base)
        cycle = np.arange(n) % (MOVE_FRAMES + STOP_FRAMES)
        speeds = np.where(cycle < MOVE_FRAMES, v, 0.0)
    return headings, speeds


def generate_clip(spec: MotionSpec, noise: float = NOISE_SIGMA) -> np.ndarray:
    """Render a (frames, 8) float64 feature clip for one attribute tuple."""
    headings, speeds = _headings_and_speeds(spec)
    vx = speeds * np.cos(headings)
    vy = speeds * np.sin(headings)
    x = np.concatenate([[0.0], np.cumsum(vx[:-1]) * DT])
    y = np.concatenate([[0.0], np.cumsum(vy[:-1]) * DT])
    phase = np.concatenate([[0.0], np.cumsum(speeds[:-1]) * DT]) * (2.0 * np.pi / PHASE_STRIDE)
    clip = np.stack(
        [x, y, vx, vy, np.sin(headings), np.cos(headings), np.sin(phase), np.cos(phase)],
        axis=1,
    )
    if noise > 0.0:
        rng = np.random.default_rng(spec.seed)
        scale = np.maximum(np.sqrt((clip ** 2).mean(axis=0)), 0.25)
        clip = clip + rng.standard_normal(clip.shape) * (noise * scale)
    return clip


def caption_for(action: str, direction: str, speed: str, template: int = 0) -> str:
    return TEMPLATES[action][template].format(d=direction, s=SPEED_PHRASE[speed])


def generate_pair(spec: MotionSpec, template: int | None = None):
    """Clip plus caption; the paraphrase defaults to a seed-derived choice."""
    if template is None:
        template = spec.seed % len(TEMPLATES[spec.action])
    return generate_clip(spec), caption_for(*spec.attrs, template=template)


def _wrap(angle):
    return (angle + np.pi) % (2.0 * np.pi) - np.pi


@dataclass
class ProbeResult:
    action: str
    direction: str
    speed: str
    confidence: float

    @property
    def attrs(self):
        return (self.action, self.direction, self.speed)


def attribute_probe(clip: np.ndarray) -> ProbeResult:
    """Recover (action, direction, speed) from raw features by fixed rules.

    Decision order matters: stopping is checked before turning because a
    stop-start clip has no turn signal, and net turn is checked before turn
    rate because a circle also turns every frame.  Confidence is the weakest
    of the geometric margins and sits below 0.5 for unstructured input.
    """
    clip = np.asarray(clip, dtype=np.float64)
    if clip.ndim != 2 or clip.shape[1] != FEATURE_DIM:
        raise ValueError(f"probe expects (frames, {FEATURE_DIM}), got {clip.shape}")
    speeds = np.hypot(clip[:, 2], clip[:, 3])
    moving = speeds > STOP_SPEED
    if not moving.any():
        return ProbeResult("stop-start", "right", "slow", 0.0)
    stopped_frac = 1.0 - moving.mean()
    headings = np.arctan2(clip[:, 4], clip[:, 5])
    diffs = _wrap(np.diff(headings))
    pair_moving = moving[1:] & moving[:-1]
    move_diffs = diffs[pair_moving] if pair_moving.any() else diffs
    net_turn = float(np.abs(move_diffs.sum()))
    turn_rate = float(np.abs(move_diffs).mean())

    if stopped_frac > STOP_FRAC_MIN:
        action = "stop-start"
        margin = (stopped_frac - STOP_FRAC_MIN) / STOP_FRAC_MIN
    elif net_turn > TURN_NET_MIN:
        action = "circle"
        margin = (net_turn - TURN_NET_MIN) / TURN_NET_MIN
    elif turn_rate > TURN_RATE_MIN:
        action = "zigzag"
        margin = (turn_rate - TURN_RATE_MIN) / TURN_RATE_MIN
    else:
        action = "walk-line"
        margin = (TURN_RATE_MIN - turn_rate) / TURN_RATE_MIN
    action_conf = 1.0 - np.exp(-3.0 * max(margin, 0.0))

    if action == "circle":
        # the heading sweeps a full turn, so read the launch window only
        window = max(4, clip.shape[0] // 12)
        ref = headings[:window]
    else:
        ref = headings[moving]
    vec = np.exp(1j * ref).mean()
    resultant = float(np.abs(vec))
    angle = float(np.angle(vec)) % (2.0 * np.pi)
    cardinal = int(np.round(angle / (np.pi / 2))) % 4
    direction = DIRECTIONS[cardinal]
    misalign = abs(_wrap(angle - cardinal * np.pi / 2)) / (np.pi / 4)
    dir_conf = resultant * (1.0 - misalign)

    mean_speed = float(speeds[moving].mean())
    lo, hi = SPEED_EDGES
    if mean_speed < lo:
        speed = "slow"
    elif mean_speed < hi:
        speed = "medium"
    else:
        speed = "fast"
    speed_margin = min(abs(mean_speed - lo), abs(mean_speed - hi))
    speed_conf = min(1.0, speed_margin / 0.2)

    confidence = float(np.clip(min(action_conf, dir_conf, speed_conf), 0.0, 1.0))
    return ProbeResult(action, direction, speed, confidence)


def parse_caption(text: str) -> dict | None:
    """Keyword parse back to attributes; None when any slot is missing."""
    words = text.lower().split()
    if any(w.startswith("zigzag") for w in words):
        action = "zigzag"
    elif "circle" in words:
        action = "circle"
    elif "stopping" in words or "pauses" in words:
        action = "stop-start"
    else:
        action = "walk-line"
    direction = next((w for w in words if w in DIRECTIONS), None)
    if "slowly" in words:
        speed = "slow"
    elif "medium" in words:
        speed = "medium"
    elif "quickly" in words:
        speed = "fast"
    else:
        speed = None
    if direction is None or speed is None:
        return None
    return {"action": action, "direction": direction, "speed": speed}


# ---------------------------------------------------------------------------
# vocabulary


def build_vocab() -> list[str]:
    """Specials plus every word any template can emit, alphabetical."""
    words = set()
    for action, forms in TEMPLATES.items():
        for form in forms:
            for d in DIRECTIONS:
                for s in SPEED_PHRASE.values():
                    words.update(form.format(d=d, s=s).split())
    return list(SPECIALS) + sorted(words)


def vocab_index(vocab: list[str]) -> dict:
    return {w: i for i, w in enumerate(vocab)}


def tokenize(text: str, index: dict, max_len: int = MAX_TOKENS) -> list[int]:
    ids = [BOS] + [index.get(w, UNK) for w in text.lower().split()]
    ids = ids[: max_len - 1]
    ids.append(EOS)
    return ids


def detokenize(ids, vocab: list[str]) -> str:
    words = []
    for i in ids:
        if i == EOS:
            break
        if i in (PAD, BOS):
            continue
        words.append(vocab[i] if 0 <= i < len(vocab) else SPECIALS[UNK])
    return " ".join(words)


# ---------------------------------------------------------------------------
# corpus


@dataclass
class Corpus:
    clips: list
    captions: list
    specs: list
    templates: list
    split: list            # "train" / "test" per item
    mean: np.ndarray
    std: np.ndarray
    vocab: list
    meta: dict

    def indices(self, split: str):
        return [i for i, s in enumerate(self.split) if s == split]

    def normalize(self, clip: np.ndarray) -> np.ndarray:
        return (clip - self.mean) / self.std

    def denormalize(self, clip: np.ndarray) -> np.ndarray:
        return clip * self.std + self.mean

    def __len__(self):
        return len(self.clips)


def _item_seed(corpus_seed, action, direction, speed, template, k):
    key = f"{corpus_seed}|{action}|{direction}|{speed}|{template}|{k}"
    return zlib.crc32(key.encode())


def build_corpus(seeds_per_combo: int = 35, corpus_seed: int = 0,
                 noise: float = NOISE_SIGMA) -> Corpus:
    """48 attribute combos x 3 paraphrases x seeds, split 90/10 by item hash."""
    clips, captions, specs, templates, split = [], [], [], [], []
    for action in ACTIONS:
        for direction in DIRECTIONS:
            for speed in SPEEDS:
                for template in range(len(TEMPLATES[action])):
                    for k in range(seeds_per_combo):
                        mix = _item_seed(corpus_seed, action, direction, speed, template, k)
                        rng = np.random.default_rng(mix)
                        frames = int(rng.integers(FRAME_RANGE[0], FRAME_RANGE[1] + 1))
                        spec = MotionSpec(action, direction, speed, frames, seed=mix)
                        clips.append(generate_clip(spec, noise=noise))
                        captions.append(caption_for(action, direction, speed, template))
                        specs.append(spec)
                        templates.append(template)
                        split.append("test" if zlib.crc32(f"split|{mix}".encode()) % 10 == 0 else "train")
    train_frames = np.concatenate([clips[i] for i, s in enumerate(split) if s == "train"])
    mean = train_frames.mean(axis=0)
    std = np.maximum(train_frames.std(axis=0), 1e-6)
    meta = {
        "version": 1,
        "corpus_seed": corpus_seed,
        "seeds_per_combo": seeds_per_combo,
        "noise": noise,
        "fps": FPS,
        "feature_dim": FEATURE_DIM,
        "n_items": len(clips),
        "n_train": split.count("train"),
        "n_test": split.count("test"),
    }
    return Corpus(clips, captions, specs, templates, split, mean, std, build_vocab(), meta)


# ---------------------------------------------------------------------------
# on-disk format: data.bin (framed float32 clips + crc), captions.txt,
# vocab.txt, manifest.json

_MAGIC = b"MOTD"
_VERSION = 1


def save_corpus(corpus: Corpus, dirpath) -> None:
    root = Path(dirpath)
    root.mkdir(parents=True, exist_ok=True)
    payload = bytearray()
    for clip in corpus.clips:
        arr = np.ascontiguousarray(clip, dtype=np.float32)
        payload += struct.pack("<I", arr.shape[0])
        payload += arr.tobytes()
    blob = struct.pack("<4sIII", _MAGIC, _VERSION, len(corpus.clips), FEATURE_DIM)
    blob += bytes(payload)
    blob += struct.pack("<I", zlib.crc32(bytes(payload)))
    (root / "data.bin").write_bytes(blob)
    (root / "captions.txt").write_text("\n".join(corpus.captions) + "\n")
    (root / "vocab.txt").write_text("\n".join(corpus.vocab) + "\n")
    manifest = dict(corpus.meta)
    manifest.update(
        mean=corpus.mean.tolist(),
        std=corpus.std.tolist(),
        items=[
            {
                "action": s.action,
                "direction": s.direction,
                "speed": s.speed,
                "frames": s.frames,
                "seed": s.seed,
                "template": t,
                "split": sp,
            }
            for s, t, sp in zip(corpus.specs, corpus.templates, corpus.split)
        ],
    )
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_corpus(dirpath) -> Corpus:
    root = Path(dirpath)
    blob = (root / "data.bin").read_bytes()
    magic, version, n, feat = struct.unpack_from("<4sIII", blob, 0)
    if magic != _MAGIC:
        raise ValueError(f"bad magic {magic!r} in {root / 'data.bin'}")
    if version != _VERSION:
        raise ValueError(f"unsupported data version {version}")
    if feat != FEATURE_DIM:
        raise ValueError(f"feature dim {feat} != {FEATURE_DIM}")
    payload = blob[16:-4]
    (stored_crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(payload) != stored_crc:
        raise ValueError("corpus payload failed its checksum")
    clips = []
    offset = 0
    for _ in range(n):
        (frames,) = struct.unpack_from("<I", payload, offset)
        offset += 4
        count = frames * feat * 4
        arr = np.frombuffer(payload, dtype="<f4", count=frames * feat, offset=offset)
        clips.append(arr.reshape(frames, feat).astype(np.float64))
        offset += count
    if offset != len(payload):
        raise ValueError("corpus payload has trailing bytes")
    manifest = json.loads((root / "manifest.json").read_text())
    captions = (root / "captions.txt").read_text().splitlines()
    vocab = (root / "vocab.txt").read_text().splitlines()
    items = manifest.pop("items")
    if len(items) != n or len(captions) != n:
        raise ValueError("manifest, captions, and data disagree on item count")
    specs = [MotionSpec(i["action"], i["direction"], i["speed"], i["frames"], i["seed"]) for i in items]
    return Corpus(
        clips=clips,
        captions=captions,
        specs=specs,
        templates=[i["template"] for i in items],
        split=[i["split"] for i in items],
        mean=np.asarray(manifest.pop("mean")),
        std=np.asarray(manifest.pop("std")),
        vocab=vocab,
        meta=manifest,
    )
