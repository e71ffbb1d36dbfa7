"""
Teacher (3D clip CNN), student (2D frame CNN with hallucination and task
heads) and the LSTM sequence aggregator.

All weights are initialized from a seeded generator: conv/linear weights are
He-uniform, U(-sqrt(6 / fan_in), +sqrt(6 / fan_in)); LSTM weights are
U(-1/sqrt(hidden), +1/sqrt(hidden)); every bias starts at zero.
"""

import hashlib
import math
from collections import namedtuple
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .synthvid import ATTRIBUTE_ARITIES, VideoClip

StudentOutput = namedtuple(
    "StudentOutput", "embedding hallucinated class_logits attribute_logits quality"
)
AggregateOutput = namedtuple("AggregateOutput", "attribute_logits quality hidden")


@dataclass
class TeacherConfig:
    in_channels: int = 1
    frames: int = 16
    height: int = 32
    width: int = 32
    channels: tuple = (8, 16, 64)
    num_classes: int = 7
    init_seed: int = 0

    @property
    def feature_dim(self):
        return self.channels[-1]

    @property
    def input_shape(self):
        return (self.frames, self.in_channels, self.height, self.width)


@dataclass
class StudentConfig:
    in_channels: int = 1
    height: int = 32
    width: int = 32
    channels: tuple = (8, 16, 32, 64)
    feature_dim: int = 64  # teacher D_t
    num_classes: int = 7
    attribute_arities: tuple = ATTRIBUTE_ARITIES
    frames: int = 1  # 1, or 2 for the ordered-pair variant
    direct: bool = False  # task heads read the hallucinated vector
    init_seed: int = 0

    @property
    def embed_dim(self):
        return self.channels[-1]

    @property
    def input_shape(self):
        if self.frames == 1:
            return (self.in_channels, self.height, self.width)
        return (self.frames, self.in_channels, self.height, self.width)


@dataclass
class SequenceConfig:
    student: StudentConfig = None
    hidden: int = 64
    attribute_arities: tuple = ATTRIBUTE_ARITIES
    init_seed: int = 0

    def __post_init__(self):
        if self.student is None:
            self.student = StudentConfig()
        elif isinstance(self.student, dict):
            s = dict(self.student)
            for k in ("channels", "attribute_arities"):
                if k in s:
                    s[k] = tuple(s[k])
            self.student = StudentConfig(**s)
        self.attribute_arities = tuple(self.attribute_arities)


def _pool_kernel(sizes):
    return tuple(2 if s >= 2 else 1 for s in sizes)


def conv_stack_shapes(in_sizes, n_blocks):
    """Spatial(-temporal) sizes after each conv(pad 1) -> ReLU -> maxpool block."""
    sizes = [tuple(in_sizes)]
    for _ in range(n_blocks):
        k = _pool_kernel(sizes[-1])
        sizes.append(tuple(s // kk for s, kk in zip(sizes[-1], k)))
    return sizes


class ConvStack(nn.Module):
    """conv(k=3, pad=1) -> ReLU -> maxpool(2 where the dim allows), then global average pool."""

    def __init__(self, in_channels, channels, in_sizes):
        super().__init__()
        dims = len(in_sizes)
        conv = {2: nn.Conv2d, 3: nn.Conv3d}[dims]
        self.pool_fn = {2: F.max_pool2d, 3: F.max_pool3d}[dims]
        self.sizes = conv_stack_shapes(in_sizes, len(channels))
        self.kernels = [_pool_kernel(s) for s in self.sizes[:-1]]
        chans = (in_channels,) + tuple(channels)
        self.convs = nn.ModuleList(
            conv(chans[i], chans[i + 1], kernel_size=3, padding=1) for i in range(len(channels))
        )

    def forward(self, x):
        for conv, k in zip(self.convs, self.kernels):
            x = F.relu(conv(x))
            if any(kk > 1 for kk in k):
                x = self.pool_fn(x, kernel_size=k)
        return x.flatten(2).mean(dim=2)


def init_parameters(model, seed):
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in sorted(model.named_parameters()):
            if "bias" in name:
                p.zero_()
            elif "lstm" in name:
                bound = 1.0 / math.sqrt(p.shape[0] // 4)
                p.copy_(torch.rand(p.shape, generator=gen) * 2 * bound - bound)
            else:
                fan_in = p[0].numel()
                bound = math.sqrt(6.0 / fan_in)
                p.copy_(torch.rand(p.shape, generator=gen) * 2 * bound - bound)


class TeacherModel(nn.Module):
    kind = "teacher"

    def __init__(self, config=None):
        super().__init__()
        self.config = config or TeacherConfig()
        c = self.config
        self.backbone = ConvStack(c.in_channels, c.channels, (c.frames, c.height, c.width))
        self.classifier = nn.Linear(c.feature_dim, c.num_classes)
        self.frozen = False
        init_parameters(self, c.init_seed)

    def forward(self, clips):
        """clips: [B, T, C, H, W] -> (features [B, D_t], logits [B, K])."""
        feats = self.backbone(clips.permute(0, 2, 1, 3, 4))
        return feats, self.classifier(feats)

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self.eval()


class StudentModel(nn.Module):
    kind = "student"

    def __init__(self, config=None):
        super().__init__()
        self.config = config or StudentConfig()
        c = self.config
        if c.frames not in (1, 2):
            raise ValueError("student supports 1 or 2 input frames")
        self.backbone = ConvStack(c.in_channels, c.channels, (c.height, c.width))
        width = c.frames * c.embed_dim
        self.hallucinate = nn.Linear(width, c.feature_dim)
        head_in = c.feature_dim if c.direct else width
        self.classifier = nn.Linear(head_in, c.num_classes)
        self.attribute_heads = nn.ModuleList(nn.Linear(head_in, a) for a in c.attribute_arities)
        self.quality_head = nn.Linear(head_in, 1)
        init_parameters(self, c.init_seed)

    def embed(self, frames):
        """[B, C, H, W] -> [B, D_s]; for 2-frame models [B, 2, C, H, W] -> [B, 2*D_s]."""
        if self.config.frames == 1:
            return self.backbone(frames)
        b = frames.shape[0]
        per_frame = self.backbone(frames.flatten(0, 1))
        return per_frame.reshape(b, -1)  # ordered concatenation

    def heads(self, embedding):
        hallucinated = self.hallucinate(embedding)
        z = hallucinated if self.config.direct else embedding
        return StudentOutput(
            embedding=embedding,
            hallucinated=hallucinated,
            class_logits=self.classifier(z),
            attribute_logits=[h(z) for h in self.attribute_heads],
            quality=self.quality_head(z).squeeze(-1),
        )

    def forward(self, frames):
        return self.heads(self.embed(frames))


class SequenceAggregator(nn.Module):
    kind = "aggregator"

    def __init__(self, input_dim, hidden=64, attribute_arities=ATTRIBUTE_ARITIES, init_seed=0):
        super().__init__()
        self.lstm = nn.LSTM(input_dim, hidden, num_layers=1, batch_first=True)
        self.attribute_heads = nn.ModuleList(nn.Linear(hidden, a) for a in attribute_arities)
        self.quality_head = nn.Linear(hidden, 1)
        init_parameters(self, init_seed)

    def forward(self, embeddings):
        """[B, S, D] -> heads on the last hidden state."""
        _, (h, _) = self.lstm(embeddings)
        h = h[-1]
        return AggregateOutput(
            attribute_logits=[head(h) for head in self.attribute_heads],
            quality=self.quality_head(h).squeeze(-1),
            hidden=h,
        )


class SequenceModel(nn.Module):
    """Shared-weight student over sparse frames, LSTM on top."""

    kind = "sequence"

    def __init__(self, config=None, student=None):
        super().__init__()
        self.config = config or SequenceConfig()
        c = self.config
        self.student = student if student is not None else StudentModel(c.student)
        self.config.student = self.student.config
        sc = self.student.config
        self.aggregator = SequenceAggregator(
            sc.frames * sc.embed_dim, c.hidden, c.attribute_arities, c.init_seed
        )

    def forward(self, frames):
        """frames: [B, S, C, H, W] (pairs: [B, S, 2, C, H, W]) -> (AggregateOutput, hallucinated [B, S, D_t])."""
        b, s = frames.shape[:2]
        emb = self.student.embed(frames.flatten(0, 1))
        hallucinated = self.student.hallucinate(emb).reshape(b, s, -1)
        return self.aggregator(emb.reshape(b, s, -1)), hallucinated


# -- single-sample operations ---------------------------------------------------


def _as_tensor(x, model=None):
    """Tensor in the model's parameter dtype (float32 when no model is given)."""
    if isinstance(x, VideoClip):
        x = x.frames
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(np.ascontiguousarray(x))
    dtype = next(model.parameters()).dtype if model is not None else torch.float32
    return x.to(dtype)


def _check_shape(x, expected, what):
    if tuple(x.shape) != tuple(expected):
        raise ValueError(f"{what}: expected shape {tuple(expected)}, got {tuple(x.shape)}")


def teacher_forward(teacher, clip):
    """(features [D_t], logits [K]) for one clip [T, C, H, W]; never records gradients."""
    x = _as_tensor(clip, teacher)
    _check_shape(x, teacher.config.input_shape, "teacher input")
    with torch.no_grad():
        feats, logits = teacher(x.unsqueeze(0))
    return feats[0], logits[0]


def student_forward(student, frame):
    x = _as_tensor(frame, student)
    if student.config.frames != 1:
        raise ValueError("use student_forward_multiframe for a 2-frame student")
    _check_shape(x, student.config.input_shape, "student input")
    with torch.no_grad():
        out = student(x.unsqueeze(0))
    return _unbatch(out)


def student_forward_multiframe(student, frames):
    """Ordered pair [F_j, F_{j+k}] through the shared backbone."""
    if len(frames) != 2:
        raise ValueError(f"expected exactly 2 frames, got {len(frames)}")
    if student.config.frames != 2:
        raise ValueError("student was not built for 2 frames")
    x = torch.stack([_as_tensor(f, student) for f in frames])
    _check_shape(x, student.config.input_shape, "student input")
    with torch.no_grad():
        out = student(x.unsqueeze(0))
    return _unbatch(out)


def _unbatch(out):
    return StudentOutput(
        embedding=out.embedding[0],
        hallucinated=out.hallucinated[0],
        class_logits=out.class_logits[0],
        attribute_logits=[a[0] for a in out.attribute_logits],
        quality=out.quality[0],
    )


def aggregate_sequence(aggregator, per_frame_embeddings):
    if len(per_frame_embeddings) == 0:
        raise ValueError("empty sequence")
    vecs = [_as_tensor(e, aggregator) for e in per_frame_embeddings]
    if len({tuple(v.shape) for v in vecs}) != 1 or vecs[0].dim() != 1:
        raise ValueError("per-frame embeddings must be 1-d vectors of equal length")
    with torch.no_grad():
        out = aggregator(torch.stack(vecs).unsqueeze(0))
    return AggregateOutput(
        attribute_logits=[a[0] for a in out.attribute_logits],
        quality=out.quality[0],
        hidden=out.hidden[0],
    )


def count_parameters(model):
    return sum(p.numel() for p in model.parameters())


def parameter_checksum(model):
    """sha256 over names and raw bytes of every parameter and buffer."""
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
