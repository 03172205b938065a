"""Synthetic multimodal patients from a confounded linear-Gaussian SCM, plus masking.

Generative story (one patient)::

    z ~ N(0, I)                          latent confounder
    b = gamma * G_b z + eps_b            bias factors, driven by z
    c ~ N(0, I)                          causal factors
    y ~ Cat(softmax(W_y c + eta W_z z))  label; eta leaks z into y
    x_m = A_m c + B_m b + sigma * eps_m  modality m features
    age = clip(55 + 15 z_0, 18, 90)      demographic analog, tracks z
    severity = clip(5 + 3 c_0, 0, 24)    SOFA analog, tracks c

Masks start all-ones; :func:`apply_mcar` and :func:`apply_mnar` knock modalities
out.  Masked features stay in memory (the complete X) but carry ``mask == 0``
and are never read by the models.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

AGE_BRACKETS = (40.0, 65.0)
SEVERITY_THRESHOLD = 5.0
GROUP_NAMES = (
    "Young, Low severity",
    "Young, High severity",
    "Middle, Low severity",
    "Middle, High severity",
    "Old, Low severity",
    "Old, High severity",
)
TEMPLATE_MODALITIES = ("Med", "Lab", "Notes", "Vital")
DEFAULT_TEMPLATE = (
    (0.15, 0.30, 0.18, 0.35),
    (0.12, 0.25, 0.15, 0.30),
    (0.10, 0.20, 0.12, 0.25),
    (0.08, 0.15, 0.10, 0.20),
    (0.05, 0.10, 0.08, 0.15),
    (0.03, 0.08, 0.05, 0.10),
)
_MAX_REROLLS = 1000


class SchemaError(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass
class MultimodalSample:
    id: int
    x: list[np.ndarray]
    mask: np.ndarray
    y: int
    age: float
    severity: float
    z: np.ndarray | None = None
    c: np.ndarray | None = None
    b: np.ndarray | None = None

    @property
    def num_modalities(self) -> int:
        return len(self.x)

    @property
    def fully_observed(self) -> bool:
        return bool(self.mask.all())

    def with_mask(self, mask) -> "MultimodalSample":
        return replace(self, mask=np.asarray(mask, dtype=np.int8).copy())


@dataclass
class DatasetSchema:
    feature_dims: list[int]
    num_classes: int
    dim_z: int
    dim_c: int
    dim_b: int
    A: list[np.ndarray]
    B: list[np.ndarray]
    W_y: np.ndarray
    W_z: np.ndarray
    G_b: np.ndarray
    gamma: float = 1.0
    eta: float = 1.0
    sigma: float = 0.5
    modality_names: list[str] = field(default_factory=list)

    @property
    def num_modalities(self) -> int:
        return len(self.feature_dims)

    @classmethod
    def default(
        cls,
        seed: int = 0,
        *,
        num_modalities: int = 4,
        feature_dim: int = 16,
        latent_dim: int = 4,
        num_classes: int = 2,
        gamma: float = 1.5,
        eta: float = 1.0,
        sigma: float = 0.5,
        causal_scale: float = 1.0,
        bias_scale: float = 1.0,
        label_scale: float = 1.5,
    ) -> "DatasetSchema":
        """Desk-scale schema with mixing matrices drawn from ``seed``.

        The first causal coordinate (which sets severity) always pushes the label
        toward higher classes, so severity groups correlate with the outcome.
        """
        rng = np.random.default_rng(seed)
        M, F, k, C = num_modalities, feature_dim, latent_dim, num_classes
        A = [causal_scale * rng.normal(size=(F, k)) / np.sqrt(k) for _ in range(M)]
        B = [bias_scale * rng.normal(size=(F, k)) / np.sqrt(k) for _ in range(M)]
        W_y = label_scale * rng.normal(size=(C, k)) / np.sqrt(k)
        W_y[:, 0] = label_scale * np.linspace(-0.5, 0.5, C) * 2.0
        W_z = rng.normal(size=(C, k)) / np.sqrt(k)
        W_z[:, 0] = np.linspace(-0.5, 0.5, C) * 2.0
        G_b = rng.normal(size=(k, k)) / np.sqrt(k)
        names = [f"m{i}" for i in range(M)]
        schema = cls([F] * M, C, k, k, k, A, B, W_y, W_z, G_b, gamma, eta, sigma, names)
        schema.validate()
        return schema

    def validate(self) -> None:
        M = self.num_modalities
        if M < 1 or self.num_classes < 2:
            raise SchemaError("need at least one modality and two classes")
        if len(self.A) != M or len(self.B) != M:
            raise SchemaError(f"expected {M} mixing matrices, got A={len(self.A)} B={len(self.B)}")
        for m, F in enumerate(self.feature_dims):
            if np.shape(self.A[m]) != (F, self.dim_c):
                raise SchemaError(f"A[{m}] has shape {np.shape(self.A[m])}, expected {(F, self.dim_c)}")
            if np.shape(self.B[m]) != (F, self.dim_b):
                raise SchemaError(f"B[{m}] has shape {np.shape(self.B[m])}, expected {(F, self.dim_b)}")
        checks = {
            "W_y": (self.W_y, (self.num_classes, self.dim_c)),
            "W_z": (self.W_z, (self.num_classes, self.dim_z)),
            "G_b": (self.G_b, (self.dim_b, self.dim_z)),
        }
        for name, (arr, want) in checks.items():
            if np.shape(arr) != want:
                raise SchemaError(f"{name} has shape {np.shape(arr)}, expected {want}")
        if min(self.gamma, self.eta, self.sigma) < 0:
            raise SchemaError("gamma, eta and sigma must be non-negative")
        if self.modality_names and len(self.modality_names) != M:
            raise SchemaError("modality_names length differs from number of modalities")

    def to_dict(self) -> dict:
        return {
            "feature_dims": list(self.feature_dims),
            "num_classes": self.num_classes,
            "dim_z": self.dim_z,
            "dim_c": self.dim_c,
            "dim_b": self.dim_b,
            "A": [np.asarray(a).tolist() for a in self.A],
            "B": [np.asarray(b).tolist() for b in self.B],
            "W_y": np.asarray(self.W_y).tolist(),
            "W_z": np.asarray(self.W_z).tolist(),
            "G_b": np.asarray(self.G_b).tolist(),
            "gamma": self.gamma,
            "eta": self.eta,
            "sigma": self.sigma,
            "modality_names": list(self.modality_names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSchema":
        schema = cls(
            feature_dims=[int(f) for f in d["feature_dims"]],
            num_classes=int(d["num_classes"]),
            dim_z=int(d["dim_z"]),
            dim_c=int(d["dim_c"]),
            dim_b=int(d["dim_b"]),
            A=[np.asarray(a, dtype=float) for a in d["A"]],
            B=[np.asarray(b, dtype=float) for b in d["B"]],
            W_y=np.asarray(d["W_y"], dtype=float),
            W_z=np.asarray(d["W_z"], dtype=float),
            G_b=np.asarray(d["G_b"], dtype=float),
            gamma=float(d.get("gamma", 1.0)),
            eta=float(d.get("eta", 1.0)),
            sigma=float(d.get("sigma", 0.5)),
            modality_names=list(d.get("modality_names", [])),
        )
        schema.validate()
        return schema

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "DatasetSchema":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def generate_dataset(schema: DatasetSchema, n: int, seed: int) -> list[MultimodalSample]:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    schema.validate()
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((n, schema.dim_z))
    Bf = schema.gamma * Z @ np.asarray(schema.G_b).T + rng.standard_normal((n, schema.dim_b))
    Cf = rng.standard_normal((n, schema.dim_c))
    probs = _softmax_rows(Cf @ np.asarray(schema.W_y).T + schema.eta * Z @ np.asarray(schema.W_z).T)
    u = rng.random(n)
    y = np.minimum((u[:, None] > np.cumsum(probs, axis=1)).sum(axis=1), schema.num_classes - 1)
    X = [
        Cf @ np.asarray(A).T + Bf @ np.asarray(B).T + schema.sigma * rng.standard_normal((n, F))
        for A, B, F in zip(schema.A, schema.B, schema.feature_dims)
    ]
    age = np.clip(55.0 + 15.0 * Z[:, 0], 18.0, 90.0)
    severity = np.clip(5.0 + 3.0 * Cf[:, 0], 0.0, 24.0)
    full = np.ones(schema.num_modalities, dtype=np.int8)
    return [
        MultimodalSample(
            id=i,
            x=[X[m][i].copy() for m in range(schema.num_modalities)],
            mask=full.copy(),
            y=int(y[i]),
            age=float(age[i]),
            severity=float(severity[i]),
            z=Z[i].copy(),
            c=Cf[i].copy(),
            b=Bf[i].copy(),
        )
        for i in range(n)
    ]


def causal_logit_score(schema: DatasetSchema, c: np.ndarray) -> np.ndarray:
    """Bayes-optimal binary score from the true causal factors.

    z is independent of c, so P(y=1 | c) is monotone in the class-1 minus
    class-0 causal logit; that difference ranks patients optimally.
    """
    W = np.asarray(schema.W_y)
    return np.asarray(c) @ (W[1] - W[0])


# -- masking -----------------------------------------------------------------


def _reroll_until_observed(keep_prob: np.ndarray, prior: np.ndarray, rng) -> np.ndarray:
    # keep_prob[m]: chance modality m survives this round; prior: mask before the round.
    for _ in range(_MAX_REROLLS):
        new = prior & (rng.random(len(keep_prob)) < keep_prob)
        if new.any():
            return new
    # Every surviving modality is (numerically) certain to be dropped: keep the likeliest.
    fallback = np.zeros_like(prior)
    candidates = np.flatnonzero(prior)
    fallback[candidates[np.argmax(keep_prob[candidates])]] = 1
    return fallback


def _apply_keep_probs(
    samples: Sequence[MultimodalSample], keep: np.ndarray, seed: int
) -> list[MultimodalSample]:
    rng = np.random.default_rng(seed)
    out = []
    for s, kp in zip(samples, keep):
        prior = s.mask.astype(bool)
        new = prior & (rng.random(len(kp)) < kp)
        if prior.any() and not new.any():
            new = _reroll_until_observed(kp, prior, rng)
        out.append(s.with_mask(new.astype(np.int8)))
    return out


def apply_mcar(samples: Sequence[MultimodalSample], rate: float, seed: int) -> list[MultimodalSample]:
    """Drop each (sample, modality) pair independently with probability ``rate``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"MCAR rate must lie in [0, 1), got {rate}")
    if not samples:
        return []
    M = samples[0].num_modalities
    keep = np.full((len(samples), M), 1.0 - rate)
    return _apply_keep_probs(samples, keep, seed)


@dataclass
class MaskTemplate:
    probs: np.ndarray
    group_names: tuple[str, ...] = GROUP_NAMES
    modality_names: tuple[str, ...] = TEMPLATE_MODALITIES
    age_brackets: tuple[float, float] = AGE_BRACKETS
    severity_threshold: float = SEVERITY_THRESHOLD

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        if self.probs.shape != (len(self.group_names), len(self.modality_names)):
            raise SchemaError(
                f"template grid {self.probs.shape} does not match "
                f"{len(self.group_names)} groups x {len(self.modality_names)} modalities"
            )
        if np.any((self.probs < 0) | (self.probs > 1)):
            raise SchemaError("template probabilities must lie in [0, 1]")

    @classmethod
    def default(cls) -> "MaskTemplate":
        return cls(np.array(DEFAULT_TEMPLATE))

    def final_probs(self, alpha: float) -> np.ndarray:
        if alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {alpha}")
        return np.minimum(alpha * self.probs, 1.0)

    def to_dict(self) -> dict:
        return {
            "groups": list(self.group_names),
            "modalities": list(self.modality_names),
            "probs": self.probs.tolist(),
            "age_brackets": list(self.age_brackets),
            "severity_threshold": self.severity_threshold,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MaskTemplate":
        return cls(
            probs=np.asarray(d["probs"], dtype=float),
            group_names=tuple(d.get("groups", GROUP_NAMES)),
            modality_names=tuple(d.get("modalities", TEMPLATE_MODALITIES)),
            age_brackets=tuple(d.get("age_brackets", AGE_BRACKETS)),
            severity_threshold=float(d.get("severity_threshold", SEVERITY_THRESHOLD)),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "MaskTemplate":
        return cls.from_dict(json.loads(Path(path).read_text()))


def assign_group(
    sample: MultimodalSample,
    age_brackets: tuple[float, float] = AGE_BRACKETS,
    severity_threshold: float = SEVERITY_THRESHOLD,
) -> int:
    """Group 1..6: (young <40 | middle 40-65 | old >65) x (low <5 | high >=5 severity)."""
    lo, hi = age_brackets
    age_idx = 0 if sample.age < lo else (1 if sample.age <= hi else 2)
    sev_idx = 0 if sample.severity < severity_threshold else 1
    return 2 * age_idx + sev_idx + 1


def _template_keep_probs(samples, template: MaskTemplate, alpha: float, maskable: Sequence[int]):
    maskable = list(maskable)
    if not maskable:
        raise ValueError("maskable modality set is empty")
    if len(maskable) > len(template.modality_names):
        raise ValueError(
            f"{len(maskable)} maskable modalities but the template has "
            f"{len(template.modality_names)} columns"
        )
    p_final = template.final_probs(alpha)
    M = samples[0].num_modalities
    if max(maskable) >= M or min(maskable) < 0:
        raise ValueError(f"maskable index out of range for {M} modalities")
    keep = np.ones((len(samples), M))
    for i, s in enumerate(samples):
        g = assign_group(s, template.age_brackets, template.severity_threshold) - 1
        for col, m in enumerate(maskable):
            keep[i, m] = 1.0 - p_final[g, col]
    return keep


def apply_mnar(
    samples: Sequence[MultimodalSample],
    template: MaskTemplate,
    alpha: float,
    maskable_modalities: Sequence[int],
    seed: int,
) -> list[MultimodalSample]:
    """Group-conditioned masking with probability min(alpha * template, 1).

    Maskable modality ``maskable_modalities[j]`` uses template column ``j``.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    if not samples:
        return []
    keep = _template_keep_probs(samples, template, alpha, maskable_modalities)
    return _apply_keep_probs(samples, keep, seed)


def expected_mnar_rate(samples, template: MaskTemplate, alpha: float, maskable: Sequence[int]) -> float:
    """Mean of p_final over (sample, maskable modality) pairs."""
    keep = _template_keep_probs(samples, template, alpha, maskable)
    return float(1.0 - keep[:, list(maskable)].mean())


def alpha_for_rate(samples, template: MaskTemplate, target: float, maskable: Sequence[int]) -> float:
    """Scaling factor whose expected MNAR rate on ``samples`` equals ``target``."""
    top = expected_mnar_rate(samples, template, 1e6, maskable)
    if not 0.0 <= target < top:
        raise ValueError(f"target rate {target} unreachable (max {top:.3f})")
    lo, hi = 0.0, 1.0
    while expected_mnar_rate(samples, template, hi, maskable) < target:
        hi *= 2.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if expected_mnar_rate(samples, template, mid, maskable) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def missing_fraction(samples: Iterable[MultimodalSample], modalities: Sequence[int] | None = None) -> float:
    masks = np.array([s.mask for s in samples])
    if masks.size == 0:
        return 0.0
    if modalities is not None:
        masks = masks[:, list(modalities)]
    return float(1.0 - masks.mean())


# -- JSON-lines I/O ----------------------------------------------------------

_REQUIRED = ("id", "x", "mask", "y", "age", "severity")


def _to_record(s: MultimodalSample) -> dict:
    rec = {
        "id": s.id,
        "x": [np.asarray(v).tolist() for v in s.x],
        "mask": [int(v) for v in s.mask],
        "y": int(s.y),
        "age": float(s.age),
        "severity": float(s.severity),
    }
    for key in ("z", "c", "b"):
        val = getattr(s, key)
        if val is not None:
            rec[key] = np.asarray(val).tolist()
    return rec


def write_dataset(samples: Sequence[MultimodalSample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(_to_record(s)))
            fh.write("\n")


def _from_record(rec: dict, lineno: int, num_modalities: int | None) -> MultimodalSample:
    missing = [k for k in _REQUIRED if k not in rec]
    if missing:
        raise DatasetFormatError(f"line {lineno}: missing field(s) {', '.join(missing)}")
    x = [np.asarray(v, dtype=float) for v in rec["x"]]
    mask = np.asarray(rec["mask"], dtype=np.int8)
    if mask.ndim != 1 or len(mask) != len(x):
        raise DatasetFormatError(f"line {lineno}: mask length {mask.size} != {len(x)} modalities")
    if num_modalities is not None and len(mask) != num_modalities:
        raise DatasetFormatError(f"line {lineno}: mask length {len(mask)} != M={num_modalities}")
    if not np.isin(mask, (0, 1)).all():
        raise DatasetFormatError(f"line {lineno}: mask entries must be 0 or 1")
    y = rec["y"]
    if not isinstance(y, int) or y < 0:
        raise DatasetFormatError(f"line {lineno}: label must be a non-negative integer")
    latents = {k: np.asarray(rec[k], dtype=float) for k in ("z", "c", "b") if k in rec}
    return MultimodalSample(
        id=int(rec["id"]),
        x=x,
        mask=mask,
        y=y,
        age=float(rec["age"]),
        severity=float(rec["severity"]),
        **latents,
    )


def read_dataset(path, num_modalities: int | None = None) -> list[MultimodalSample]:
    """Read a JSON-lines dataset; the first record fixes M unless given."""
    samples: list[MultimodalSample] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise DatasetFormatError(f"line {lineno}: record is not a JSON object")
            s = _from_record(rec, lineno, num_modalities)
            if num_modalities is None:
                num_modalities = s.num_modalities
            samples.append(s)
    return samples
