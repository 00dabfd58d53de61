"""Temporal-alignment metrics on synthetic data plus verification harnesses."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch


@dataclass
class OnsetReport:
    detected: list[float]
    reference: list[float]
    tolerance: float
    accuracy: float
    matched: list[tuple[float, float]] = field(default_factory=list)

    @property
    def false_positives(self) -> int:
        return len(self.detected) - len(self.matched)


def detect_onsets(waveform: np.ndarray, threshold: float, refractory: float,
                  sample_rate: float) -> list[float]:
    """Rising-edge crossings of |amplitude| above threshold, with re-triggers
    suppressed inside the refractory window."""
    if threshold <= 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    above = np.abs(np.asarray(waveform)) > threshold
    onsets: list[float] = []
    last = -np.inf
    prev = False
    for i, hit in enumerate(above):
        t = i / sample_rate
        if hit and not prev and t - last >= refractory:
            onsets.append(t)
            last = t
        prev = bool(hit)
    return onsets


def onset_accuracy(detected, reference, tolerance: float) -> OnsetReport:
    """Greedy matching in time order: each detection claims the nearest
    still-unmatched reference within +-tolerance. Unmatched detections count
    as false positives and earn no credit."""
    detected = sorted(float(t) for t in detected)
    reference = sorted(float(t) for t in reference)
    unmatched = list(range(len(reference)))
    matched = []
    for d in detected:
        if not unmatched:
            break
        j = min(unmatched, key=lambda j: abs(reference[j] - d))
        if abs(reference[j] - d) <= tolerance:
            matched.append((d, reference[j]))
            unmatched.remove(j)
    acc = len(matched) / max(len(reference), 1)
    return OnsetReport(detected=detected, reference=reference,
                       tolerance=tolerance, accuracy=acc, matched=matched)


def alignment_score_video(frames: np.ndarray, reference_events, fps: float,
                          threshold: float = 0.5, window: int = 2) -> float:
    """Fraction of reference events whose frame window contains the visual
    signature, i.e. any pixel above the intensity threshold."""
    frames = np.asarray(frames)
    if len(list(reference_events)) == 0:
        return 1.0
    hits = 0
    n_frames = frames.shape[0]
    for t in reference_events:
        start = round(t * fps)
        stop = min(start + window, n_frames)
        if start < n_frames and frames[start:stop].max() > threshold:
            hits += 1
    return hits / len(list(reference_events))


def random_onset_baseline(n_events_per_sample, duration: float, tolerance: float,
                          n_trials: int = 2000, seed: int = 0) -> float:
    """Monte Carlo estimate of the onset accuracy achieved by placing the same
    number of onsets uniformly at random."""
    rng = np.random.default_rng(seed)
    accs = []
    for _ in range(n_trials):
        for n in n_events_per_sample:
            if n == 0:
                continue
            ref = np.sort(rng.uniform(0, duration, size=n))
            det = np.sort(rng.uniform(0, duration, size=n))
            accs.append(onset_accuracy(det, ref, tolerance).accuracy)
    return float(np.mean(accs)) if accs else 0.0


def grad_check(fn, params: dict, eps: float = 1e-4, max_entries: int = 20,
               seed: int = 0):
    """Central finite differences vs autodiff over a deterministic subsample of
    parameter entries. Returns (max relative error, worst offender name)."""
    for p in params.values():
        p.requires_grad_(True)
        if p.grad is not None:
            p.grad = None
    loss = fn()
    loss.backward()
    rng = np.random.default_rng(seed)
    worst = (0.0, "<none>")
    for name, p in params.items():
        if p.grad is None:
            continue
        flat = p.detach().reshape(-1)
        gflat = p.grad.detach().reshape(-1)
        n = flat.numel()
        idxs = rng.choice(n, size=min(max_entries, n), replace=False)
        for i in idxs:
            i = int(i)
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                lp = fn().item()
                flat[i] = orig - eps
                lm = fn().item()
                flat[i] = orig
            fd = (lp - lm) / (2 * eps)
            ad = gflat[i].item()
            rel = abs(fd - ad) / (abs(fd) + abs(ad) + 1e-8)
            if rel > worst[0]:
                worst = (rel, f"{name}[{i}]")
    return worst
