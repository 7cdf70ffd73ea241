"""Reconstruction-accuracy metrics and their on-disk report format."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class EvalReport:
    """Per-frame tracking accuracy plus solver diagnostics.

    `rms` is in world units (whatever scale the dataset declares). The
    energy and negative-shading columns come from the tracker's state log
    and are zero-filled when evaluating bare geometry.
    """

    rms: np.ndarray                         # (F,)
    energy: np.ndarray = None               # (F,)
    neg_shading_frac: np.ndarray = None     # (F,)
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rms = np.asarray(self.rms, dtype=np.float64).ravel()
        n = len(self.rms)
        if self.energy is None:
            self.energy = np.zeros(n)
        if self.neg_shading_frac is None:
            self.neg_shading_frac = np.zeros(n)
        self.energy = np.asarray(self.energy, dtype=np.float64).ravel()
        self.neg_shading_frac = np.asarray(
            self.neg_shading_frac, dtype=np.float64).ravel()
        if len(self.energy) != n or len(self.neg_shading_frac) != n:
            raise ValueError("per-frame columns must have equal length")
        if np.any(self.rms < 0):
            raise ValueError("RMS cannot be negative")

    @property
    def frames(self) -> int:
        return len(self.rms)

    @property
    def mean_rms(self) -> float:
        return float(self.rms.mean()) if len(self.rms) else 0.0

    def write_tsv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for key in sorted(self.config):
                fh.write(f"# {key} = {self.config[key]}\n")
            fh.write("frame\trms\tenergy\tneg_shading_frac\n")
            for f in range(self.frames):
                fh.write(f"{f}\t{self.rms[f]:.17g}\t{self.energy[f]:.17g}"
                         f"\t{self.neg_shading_frac[f]:.17g}\n")

    @classmethod
    def read_tsv(cls, path) -> "EvalReport":
        rows = []
        config = {}
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line.startswith("#"):
                    body = line[1:].strip()
                    if "=" in body:
                        k, v = body.split("=", 1)
                        config[k.strip()] = v.strip()
                    continue
                if not line or line.startswith("frame\t"):
                    continue
                cells = line.split("\t")
                rows.append([float(c) for c in cells[1:4]])
        arr = np.asarray(rows, dtype=np.float64).reshape(-1, 3)
        return cls(rms=arr[:, 0], energy=arr[:, 1],
                   neg_shading_frac=arr[:, 2], config=config)


def frame_rms(a, b) -> float:
    """Root-mean-square vertex distance between two (N, 3) arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 3:
        raise ValueError("positions must be matching (N, 3) arrays")
    d = a - b
    return float(np.sqrt(np.mean(np.einsum("ij,ij->i", d, d))))


def evaluate_rms(reconstruction, ground_truth, *, energy=None,
                 neg_shading_frac=None, config=None) -> EvalReport:
    """Per-frame RMS between corresponding vertices (no alignment; the
    tracker is responsible for pose). Symmetric in its two arguments.

    Inputs are (F, N, 3) arrays or equal-length sequences of (N, 3).
    """
    rec = [np.asarray(p, dtype=np.float64) for p in reconstruction]
    gt = [np.asarray(p, dtype=np.float64) for p in ground_truth]
    if len(rec) != len(gt):
        raise ValueError("frame counts differ")
    if not rec:
        raise ValueError("need at least one frame")
    rms = np.array([frame_rms(a, b) for a, b in zip(rec, gt)])
    return EvalReport(rms=rms, energy=energy,
                      neg_shading_frac=neg_shading_frac,
                      config=dict(config or {}))
