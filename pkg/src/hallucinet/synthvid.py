"""
Procedural sprite videos with motion-class, attribute and quality labels.

Two motion programs are available:

* ``action`` -- short clips (default 16 frames) whose class is one of a fixed
  list of motion programs. ``rotate-cw``/``rotate-ccw`` and
  ``orbit-cw``/``orbit-ccw`` are ambiguous pairs: any single frame has the
  same distribution for both members, except for a small chirality dot on the
  sprite (the causal cue) which agrees with the true member with probability
  ``cue_strength`` and is a fair coin otherwise.
* ``dive`` -- long sequences (default 96 frames) where every combination of
  the five attributes is a class, the analog of a dive number.

Attributes are ``(shape, start_pose, rot_dir, rot_count, trans_count)`` and
are a deterministic function of the stored motion parameters, see
:func:`attributes_from_motion`. Quality is
``0.75 * extent + 0.25 * (1 - jitter / jitter_max)``.

Per-clip seeds come from ``SeedSequence([master_seed, split_index, index])``
so clips can be generated in any order or in parallel.
"""

import dataclasses
import json
import math
import shutil
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, canonical_json, config_hash, from_mapping, load_toml

ACTION_CLASSES = (
    "static",
    "translate-east",
    "translate-west",
    "rotate-cw",
    "rotate-ccw",
    "orbit-cw",
    "orbit-ccw",
)
# first frames identical in distribution for the two members
AMBIGUOUS_PAIRS = (("rotate-cw", "rotate-ccw"), ("orbit-cw", "orbit-ccw"))
# pairs whose sprites carry the chirality cue; translation start ranges
# differ, but center-frame positions overlap, so they also need it
CUE_PAIRS = AMBIGUOUS_PAIRS + (("translate-east", "translate-west"),)
SHAPES = ("disk", "square", "triangle", "cross")
ACTION_SHAPE = {
    "static": "disk",
    "translate-east": "square",
    "translate-west": "square",
    "rotate-cw": "triangle",
    "rotate-ccw": "triangle",
    "orbit-cw": "cross",
    "orbit-ccw": "cross",
}

ATTRIBUTE_NAMES = ("shape", "start_pose", "rot_dir", "rot_count", "trans_count")
ATTRIBUTE_ARITIES = (4, 2, 3, 3, 3)
# values the dive program draws from, per attribute
DIVE_VALUES = ((0, 1, 2), (0, 1), (1, 2), (1, 2), (1, 2))

SPLITS = ("train", "val", "test")

BODY_LEVEL = 0.5
MARKER_LEVEL = 1.0
CUE_LEVEL = 0.75

CLIP_MAGIC = b"SVID"
CLIP_VERSION = 1
DTYPE_CODES = {0: np.dtype("<u1"), 1: np.dtype("<f4"), 2: np.dtype("<f8")}
MANIFEST_VERSION = 1


@dataclass
class GeneratorConfig:
    name: str = "synth"
    program: str = "action"
    T: int = 16
    H: int = 32
    W: int = 32
    C: int = 1
    K: int = 7  # action program only; dive derives its class count
    sprite_radius: float = 4.0
    speed_range: tuple = (0.3, 0.7)  # px / frame, translation
    spin_range: tuple = (10.0, 20.0)  # deg / frame, rotation
    orbit_radius_range: tuple = (4.0, 6.0)
    orbit_turns_range: tuple = (0.25, 0.5)  # turns / clip
    osc_amp_range: tuple = (3.0, 8.0)  # px, dive oscillation
    jitter_max: float = 0.1  # px, uniform per-frame position jitter
    cue_radius: float = 1.0
    cue_level: float = CUE_LEVEL
    cue_frame: str = "body"  # "body": left/right of the heading; "image": above/below the sprite
    noise: float = 0.01
    cue_strength: float = 0.9
    splits: tuple = (210, 70, 70)
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def class_names(self):
        if self.program == "action":
            return list(ACTION_CLASSES[: self.K])
        return ["dive-" + "".join(str(v) for v in combo) for combo in _dive_combos()]

    @property
    def num_classes(self):
        return len(self.class_names)

    def validate(self):
        if self.program not in ("action", "dive"):
            raise ConfigError(f"unknown program {self.program!r}")
        if self.program == "action" and not 2 <= self.K <= len(ACTION_CLASSES):
            raise ConfigError(f"K must be in [2, {len(ACTION_CLASSES)}], got {self.K}")
        if self.cue_frame not in ("body", "image"):
            raise ConfigError(f"cue_frame must be 'body' or 'image', got {self.cue_frame!r}")
        if not 0.0 <= self.cue_level <= 1.0:
            raise ConfigError("cue_level must be in [0, 1]")
        if not 0.0 <= self.cue_strength <= 1.0:
            raise ConfigError("cue_strength must be in [0, 1]")
        if len(self.splits) != 3 or any(int(n) <= 0 for n in self.splits):
            raise ConfigError("splits must be three positive sizes")
        if min(self.T, self.C) < 1:
            raise ConfigError("T and C must be >= 1")
        if min(self.H, self.W) < 2 * self.sprite_radius:
            raise ConfigError(
                f"frame {self.H}x{self.W} smaller than sprite size {2 * self.sprite_radius}"
            )
        if self.noise < 0 or self.jitter_max < 0:
            raise ConfigError("noise and jitter_max must be >= 0")

    @classmethod
    def from_file(cls, path):
        data = load_toml(path)
        return from_mapping(cls, data.get("generator", data), where=str(path))

    def hash(self):
        return config_hash(self)


@dataclass
class VideoClip:
    frames: np.ndarray  # [T, C, H, W] float32 in [0, 1]
    class_id: int
    attributes: tuple
    quality: float
    clip_id: str
    seed: int
    motion: dict = field(default_factory=dict)


def _dive_combos():
    combos = [()]
    for values in DIVE_VALUES:
        combos = [c + (v,) for c in combos for v in values]
    return combos


def attributes_from_motion(m):
    """Attribute tuple derived from a motion-parameter dict."""
    shape = SHAPES.index(m["shape"])
    start_pose = 0 if math.sin(m["theta0"]) <= 0 else 1  # marker up vs down
    spin = m["spin_turns"]
    rot_dir = 0 if spin == 0 else (1 if spin > 0 else 2)
    rot_count = min(2, math.ceil(abs(spin) - 1e-9))
    travel = m["trans_cycles"]
    trans_count = min(2, math.ceil(abs(travel) - 1e-9))
    return (shape, start_pose, rot_dir, rot_count, trans_count)


def quality_from_motion(m, jitter_max):
    smooth = 1.0 - (m["jitter"] / jitter_max if jitter_max > 0 else 0.0)
    return 0.75 * m["extent"] + 0.25 * smooth


def _lerp(lo_hi, t):
    lo, hi = lo_hi
    return lo + t * (hi - lo)


def _motion_program(class_id, rng, cfg):
    """Draw motion parameters and per-frame sprite states.

    The draw order is identical for every class so that members of an
    ambiguous pair share their first frame when the cue is uninformative.
    """
    T, H, W, r = cfg.T, cfg.H, cfg.W, cfg.sprite_radius
    extent = rng.uniform()
    jitter = rng.uniform(0.0, cfg.jitter_max) if cfg.jitter_max > 0 else 0.0
    u_theta = rng.uniform()
    u_pos = rng.uniform(size=2)
    u_orbit = rng.uniform(size=2)
    u_informative = rng.uniform()
    u_coin = rng.uniform()
    jit = rng.uniform(-1.0, 1.0, size=(T, 2)) * jitter

    t = np.arange(T, dtype=np.float64)
    cx, cy = W / 2.0, H / 2.0
    m = {"extent": float(extent), "jitter": float(jitter)}

    if cfg.program == "action":
        name = ACTION_CLASSES[class_id]
        m["shape"] = ACTION_SHAPE[name]
        theta0 = 2 * math.pi * u_theta
        x = np.full(T, cx + 8.0 * (u_pos[0] - 0.5))
        y = np.full(T, cy + 8.0 * (u_pos[1] - 0.5))
        theta = np.full(T, theta0)
        spin_turns = 0.0
        trans_cycles = 0.0
        pair_member = None
        if name.startswith("translate"):
            speed = _lerp(cfg.speed_range, extent)
            travel = speed * (T - 1)
            slack = max(0.0, W - 2 * (r + 1) - travel)
            if name == "translate-east":
                x = r + 1 + slack * u_pos[0] + speed * t
            else:
                x = W - (r + 1) - slack * u_pos[0] - speed * t
            trans_cycles = 1.0
            pair_member = 0 if name == "translate-east" else 1
        elif name.startswith("rotate"):
            sign = 1.0 if name == "rotate-cw" else -1.0
            omega = math.radians(_lerp(cfg.spin_range, extent))
            theta = theta0 + sign * omega * t
            spin_turns = sign * omega * T / (2 * math.pi)
            pair_member = 0 if sign > 0 else 1
        elif name.startswith("orbit"):
            sign = 1.0 if name == "orbit-cw" else -1.0
            radius = _lerp(cfg.orbit_radius_range, u_orbit[0])
            phase0 = 2 * math.pi * u_orbit[1]
            turns = _lerp(cfg.orbit_turns_range, extent)
            phase = phase0 + sign * 2 * math.pi * turns * t / T
            ocx = cx + 4.0 * (u_pos[0] - 0.5)
            ocy = cy + 4.0 * (u_pos[1] - 0.5)
            x = ocx + radius * np.cos(phase)
            y = ocy + radius * np.sin(phase)
            trans_cycles = turns
            pair_member = 0 if sign > 0 else 1
            m["orbit_radius"] = float(radius)
        m["class"] = name
    else:
        shape, pose, rot_dir, rot_count, trans_count = _dive_combos()[class_id]
        m["shape"] = SHAPES[shape]
        base = -math.pi / 2 if pose == 0 else math.pi / 2
        theta0 = base + math.radians(40.0) * (u_theta - 0.5)
        sign = 1.0 if rot_dir == 1 else -1.0
        spin_turns = sign * rot_count
        theta = theta0 + sign * 2 * math.pi * rot_count * t / T
        amp = _lerp(cfg.osc_amp_range, extent)
        x = cx + 4.0 * (u_pos[0] - 0.5) + amp * np.sin(2 * math.pi * trans_count * t / T)
        y = np.full(T, cy + 4.0 * (u_pos[1] - 0.5))
        trans_cycles = float(trans_count)
        pair_member = rot_dir - 1
        m["osc_amp"] = float(amp)

    if pair_member is not None and u_informative < cfg.cue_strength:
        cue = pair_member
        informative = True
    else:
        cue = int(u_coin < 0.5)
        informative = False

    m.update(
        theta0=float(theta0),
        spin_turns=float(spin_turns),
        trans_cycles=float(trans_cycles),
        x0=float(x[0]),
        y0=float(y[0]),
        cue=int(cue),
        cue_informative=informative,
    )
    states = np.stack([x + jit[:, 0], y + jit[:, 1], theta], axis=1)
    return m, states


def _box_sdf(u, v, bu, bv):
    qu = np.abs(u) - bu
    qv = np.abs(v) - bv
    outside = np.hypot(np.maximum(qu, 0), np.maximum(qv, 0))
    return outside + np.minimum(np.maximum(qu, qv), 0)


def _shape_sdf(shape, u, v, r):
    if shape == "disk":
        return np.hypot(u, v) - r
    if shape == "square":
        return _box_sdf(u, v, 0.8 * r, 0.8 * r)
    if shape == "triangle":
        # equilateral, circumradius r, one vertex on +u
        d = None
        for ang in (math.pi, math.pi / 3, -math.pi / 3):
            plane = u * math.cos(ang) + v * math.sin(ang) - r / 2
            d = plane if d is None else np.maximum(d, plane)
        return d
    if shape == "cross":
        return np.minimum(_box_sdf(u, v, r, 0.35 * r), _box_sdf(u, v, 0.35 * r, r))
    raise ValueError(f"unknown shape {shape!r}")


def _coverage(sdf):
    return np.clip(0.5 - sdf, 0.0, 1.0)


def render_frame(shape, x, y, theta, cue, cfg):
    """Rasterize one sprite state into an [H, W] intensity image."""
    r = cfg.sprite_radius
    yy, xx = np.mgrid[0 : cfg.H, 0 : cfg.W].astype(np.float64)
    dx, dy = xx - x, yy - y
    c, s = math.cos(theta), math.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    img = BODY_LEVEL * _coverage(_shape_sdf(shape, u, v, r))
    mx, my = x + 0.6 * r * c, y + 0.6 * r * s
    img = np.maximum(img, MARKER_LEVEL * _coverage(np.hypot(xx - mx, yy - my) - 1.1))
    base = theta if cfg.cue_frame == "body" else 0.0
    cue_angle = base + (math.pi / 2 if cue == 0 else -math.pi / 2)
    qx, qy = x + 0.55 * r * math.cos(cue_angle), y + 0.55 * r * math.sin(cue_angle)
    img = np.maximum(img, cfg.cue_level * _coverage(np.hypot(xx - qx, yy - qy) - cfg.cue_radius))
    return img


def generate_clip(class_id, rng_seed, config, clip_id=None):
    """Render one labeled clip; bit-identical for identical arguments."""
    if not 0 <= class_id < config.num_classes:
        raise ValueError(f"class_id {class_id} outside [0, {config.num_classes})")
    config.validate()
    rng = np.random.Generator(np.random.PCG64(int(rng_seed)))
    motion, states = _motion_program(class_id, rng, config)
    frames = np.empty((config.T, config.C, config.H, config.W), dtype=np.float64)
    for i, (x, y, theta) in enumerate(states):
        frames[i, :] = render_frame(motion["shape"], x, y, theta, motion["cue"], config)
    if config.noise > 0:
        frames += config.noise * rng.standard_normal(frames.shape)
    frames = np.clip(frames, 0.0, 1.0).astype(np.float32)
    return VideoClip(
        frames=frames,
        class_id=int(class_id),
        attributes=attributes_from_motion(motion),
        quality=float(quality_from_motion(motion, config.jitter_max)),
        clip_id=clip_id or f"c{class_id}-{int(rng_seed):016x}",
        seed=int(rng_seed),
        motion=motion,
    )


def center_frame(clip):
    frames = clip.frames if isinstance(clip, VideoClip) else clip
    return frames[len(frames) // 2]


def sparse_sample(frames, stride):
    """Every `stride`-th frame starting at 0."""
    if stride <= 0:
        raise ValueError("stride must be positive")
    if len(frames) < stride:
        raise ValueError(f"sequence of length {len(frames)} shorter than stride {stride}")
    return [frames[i] for i in sparse_indices(len(frames), stride)]


def sparse_indices(length, stride):
    """Multiples of `stride` below `length` (L=96, stride=16 -> 6 indices; L=33 -> 0, 16, 32)."""
    return list(range(0, length, stride))


# -- clip files ---------------------------------------------------------------


def write_clip(path, frames):
    frames = np.ascontiguousarray(frames)
    codes = {v: k for k, v in DTYPE_CODES.items()}
    dt = frames.dtype.newbyteorder("<")
    if dt not in codes:
        raise ValueError(f"unsupported dtype {frames.dtype}")
    if frames.ndim != 4:
        raise ValueError("clip frames must be 4-d [T, C, H, W]")
    header = CLIP_MAGIC + struct.pack("<HB4I", CLIP_VERSION, codes[dt], *frames.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(frames.astype(dt, copy=False).tobytes(order="C"))


def read_clip(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CLIP_MAGIC:
        raise ValueError(f"{path}: not a clip file")
    version, code, *shape = struct.unpack_from("<HB4I", data, 4)
    if version != CLIP_VERSION:
        raise ValueError(f"{path}: unsupported clip version {version}")
    offset = 4 + struct.calcsize("<HB4I")
    arr = np.frombuffer(data, dtype=DTYPE_CODES[code], offset=offset)
    return arr.reshape(shape).astype(DTYPE_CODES[code].newbyteorder("="))


# -- manifests ----------------------------------------------------------------

MANIFEST_FIELDS = ("clip_id", "path", "class_id", "attributes", "quality", "seed", "motion")


@dataclass
class ManifestRecord:
    clip_id: str
    path: str
    class_id: int
    attributes: tuple
    quality: float
    seed: int
    motion: dict


@dataclass
class DatasetManifest:
    """Records of one split.

    File layout (UTF-8, tab separated)::

        #synthvid-manifest<TAB>v1
        #meta<TAB>{json: name, split, class_names, attribute arities, config}
        #fields<TAB>clip_id<TAB>path<TAB>class_id<TAB>attributes<TAB>quality<TAB>seed<TAB>motion
        <one record per line; attributes comma separated, motion as json>
    """

    name: str
    split: str
    records: list
    class_names: list
    generator_config_hash: str
    generator_config: dict = field(default_factory=dict)
    root: Path = None

    def to_text(self):
        meta = {
            "name": self.name,
            "split": self.split,
            "class_names": list(self.class_names),
            "attribute_names": list(ATTRIBUTE_NAMES),
            "attribute_arities": list(ATTRIBUTE_ARITIES),
            "generator_config_hash": self.generator_config_hash,
            "generator_config": self.generator_config,
        }
        lines = [
            f"#synthvid-manifest\tv{MANIFEST_VERSION}",
            "#meta\t" + json.dumps(meta, sort_keys=True),
            "#fields\t" + "\t".join(MANIFEST_FIELDS),
        ]
        for rec in self.records:
            lines.append(
                "\t".join(
                    [
                        rec.clip_id,
                        rec.path,
                        str(rec.class_id),
                        ",".join(str(a) for a in rec.attributes),
                        repr(float(rec.quality)),
                        str(rec.seed),
                        json.dumps(rec.motion, sort_keys=True),
                    ]
                )
            )
        return "\n".join(lines) + "\n"

    def write(self, path):
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def read(cls, path):
        path = Path(path)
        lines = path.read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith("#synthvid-manifest"):
            raise ValueError(f"{path}: not a manifest")
        version = lines[0].split("\t")[1]
        if version != f"v{MANIFEST_VERSION}":
            raise ValueError(f"{path}: unsupported manifest version {version}")
        meta = json.loads(lines[1].split("\t", 1)[1])
        records = []
        for line in lines[3:]:
            if not line:
                continue
            cid, rel, k, attrs, q, seed, motion = line.split("\t")
            records.append(
                ManifestRecord(
                    clip_id=cid,
                    path=rel,
                    class_id=int(k),
                    attributes=tuple(int(a) for a in attrs.split(",")),
                    quality=float(q),
                    seed=int(seed),
                    motion=json.loads(motion),
                )
            )
        return cls(
            name=meta["name"],
            split=meta["split"],
            records=records,
            class_names=meta["class_names"],
            generator_config_hash=meta["generator_config_hash"],
            generator_config=meta.get("generator_config", {}),
            root=path.parent,
        )

    def load_clip(self, record):
        frames = read_clip(self.root / record.path)
        return VideoClip(
            frames=frames,
            class_id=record.class_id,
            attributes=record.attributes,
            quality=record.quality,
            clip_id=record.clip_id,
            seed=record.seed,
            motion=record.motion,
        )

    def config(self):
        return from_mapping(GeneratorConfig, self.generator_config, where="manifest")


def clip_seed(master_seed, split_index, index):
    """Documented seed splitting rule: first u64 of SeedSequence([master, split, index])."""
    ss = np.random.SeedSequence([int(master_seed), int(split_index), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _generate_record(args):
    root, split, index, class_id, seed, cfg = args
    clip_id = f"{split}-{index:05d}"
    clip = generate_clip(class_id, seed, cfg, clip_id=clip_id)
    rel = f"clips/{split}/{clip_id}.svid"
    write_clip(Path(root) / rel, clip.frames)
    return ManifestRecord(
        clip_id=clip_id,
        path=rel,
        class_id=clip.class_id,
        attributes=clip.attributes,
        quality=clip.quality,
        seed=seed,
        motion=clip.motion,
    )


def build_dataset(config, out_dir, overwrite=False, jobs=1):
    """Generate all three splits under `out_dir`; returns {split: DatasetManifest}.

    Classes are assigned round-robin so every class count is within one of
    the others.
    """
    out = Path(out_dir)
    existing = [out / f"{s}.manifest" for s in SPLITS if (out / f"{s}.manifest").exists()]
    if existing or (out / "clips").exists():
        if not overwrite:
            raise FileExistsError(f"{out} already holds a dataset; pass overwrite=True")
        for p in existing:
            p.unlink()
        shutil.rmtree(out / "clips", ignore_errors=True)
    seen = set()
    manifests = {}
    cfg_dict = json.loads(canonical_json(config))
    for split_index, (split, size) in enumerate(zip(SPLITS, config.splits)):
        (out / "clips" / split).mkdir(parents=True, exist_ok=True)
        jobs_args = []
        for i in range(int(size)):
            seed = clip_seed(config.seed, split_index, i)
            if seed in seen:
                raise RuntimeError(f"seed collision at {split}[{i}]")
            seen.add(seed)
            jobs_args.append((str(out), split, i, i % config.num_classes, seed, config))
        if jobs > 1:
            with ProcessPoolExecutor(jobs) as pool:
                records = list(pool.map(_generate_record, jobs_args, chunksize=8))
        else:
            records = [_generate_record(a) for a in jobs_args]
        manifest = DatasetManifest(
            name=config.name,
            split=split,
            records=records,
            class_names=config.class_names,
            generator_config_hash=config.hash(),
            generator_config=cfg_dict,
            root=out,
        )
        manifest.write(out / f"{split}.manifest")
        manifests[split] = manifest
    return manifests


@dataclass
class ClipArrays:
    """A whole split held in memory, ready for batching."""

    frames: np.ndarray  # [N, T, C, H, W]
    class_ids: np.ndarray
    attributes: np.ndarray  # [N, 5]
    quality: np.ndarray
    clip_ids: list
    manifest: DatasetManifest = None

    def __len__(self):
        return len(self.class_ids)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return dataclasses.replace(
            self,
            frames=self.frames[idx],
            class_ids=self.class_ids[idx],
            attributes=self.attributes[idx],
            quality=self.quality[idx],
            clip_ids=[self.clip_ids[i] for i in idx],
        )


def load_split(manifest):
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.read(manifest)
    clips = [manifest.load_clip(r) for r in manifest.records]
    if not clips:
        raise ValueError(f"manifest {manifest.split} is empty")
    return ClipArrays(
        frames=np.stack([c.frames for c in clips]),
        class_ids=np.array([c.class_id for c in clips], dtype=np.int64),
        attributes=np.array([c.attributes for c in clips], dtype=np.int64),
        quality=np.array([c.quality for c in clips], dtype=np.float64),
        clip_ids=[c.clip_id for c in clips],
        manifest=manifest,
    )


def load_dataset(root):
    root = Path(root)
    missing = [s for s in SPLITS if not (root / f"{s}.manifest").exists()]
    if missing:
        raise FileNotFoundError(f"{root}: missing manifests for {missing}")
    return {s: load_split(root / f"{s}.manifest") for s in SPLITS}
