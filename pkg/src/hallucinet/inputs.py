"""Turn in-memory splits into model inputs and frozen-teacher targets."""

import numpy as np
import torch

from .synthvid import sparse_indices


def center_index(T):
    return T // 2


def student_inputs(arrays, frames=1, k=3):
    """Center frame [N, C, H, W], or the ordered pair (center, center + k) [N, 2, C, H, W]."""
    T = arrays.frames.shape[1]
    j = center_index(T)
    if frames == 1:
        return torch.from_numpy(arrays.frames[:, j].copy())
    if j + k >= T:
        raise ValueError(f"frame gap k={k} runs past a {T}-frame clip from index {j}")
    return torch.from_numpy(arrays.frames[:, [j, j + k]].copy())


def sequence_inputs(arrays, stride=16, frames=1, k=3):
    """Sparse frames [N, S, C, H, W] (or pairs [N, S, 2, C, H, W])."""
    L = arrays.frames.shape[1]
    if L < stride:
        raise ValueError(f"sequence of length {L} shorter than stride {stride}")
    idx = sparse_indices(L, stride)
    if frames == 1:
        return torch.from_numpy(arrays.frames[:, idx].copy())
    if idx[-1] + k >= L:
        raise ValueError(f"frame gap k={k} runs past the sequence end")
    pairs = np.stack([arrays.frames[:, idx], arrays.frames[:, [i + k for i in idx]]], axis=2)
    return torch.from_numpy(pairs)


def teacher_features(teacher, clips, batch_size=32):
    """Frozen-teacher features for clips [N, T, C, H, W]; no gradient is recorded."""
    if not torch.is_tensor(clips):
        clips = torch.from_numpy(np.ascontiguousarray(clips))
    clips = clips.to(next(teacher.parameters()).dtype)
    was_training = teacher.training
    teacher.eval()
    out = []
    with torch.no_grad():
        for s in range(0, len(clips), batch_size):
            out.append(teacher(clips[s : s + batch_size])[0])
    teacher.train(was_training)
    return torch.cat(out)


def clip_targets(teacher, arrays):
    return teacher_features(teacher, arrays.frames)


def window_targets(teacher, arrays, stride=16):
    """Teacher features of the T-frame window starting at each sampled index: [N, S, D_t]."""
    T = teacher.config.frames
    L = arrays.frames.shape[1]
    idx = sparse_indices(L, stride)
    if idx[-1] + T > L:
        raise ValueError(f"{T}-frame teacher window at index {idx[-1]} runs past length {L}")
    windows = np.stack([arrays.frames[:, i : i + T] for i in idx], axis=1)
    n, s = windows.shape[:2]
    feats = teacher_features(teacher, windows.reshape(n * s, *windows.shape[2:]))
    return feats.reshape(n, s, -1)
