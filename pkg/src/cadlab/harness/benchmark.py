"""Synthetic train/test splits with confounded MNAR masking and a shifted test mechanism."""

from __future__ import annotations

from dataclasses import dataclass, field

from ..scmgen import DatasetSchema, MaskTemplate, alpha_for_rate, apply_mnar, generate_dataset, missing_fraction


@dataclass(frozen=True)
class BenchmarkSpec:
    n_train: int = 2000
    n_test: int = 500
    num_modalities: int = 4
    feature_dim: int = 16
    maskable: tuple[int, ...] = (1, 2, 3)
    train_rate: float = 0.3
    test_alpha_scale: float = 0.5
    # a strong confounder: bias features and the confounder's pull on the label are both amplified
    schema_kwargs: dict = field(default_factory=lambda: {"bias_scale": 4.0, "eta": 2.0})


@dataclass
class Benchmark:
    schema: DatasetSchema
    train: list
    test: list
    train_alpha: float
    test_alpha: float
    maskable: tuple[int, ...] = ()

    @property
    def train_missing(self) -> float:
        return missing_fraction(self.train, self.maskable)


def make_benchmark(seed: int, spec: BenchmarkSpec = BenchmarkSpec(), template: MaskTemplate | None = None) -> Benchmark:
    """Train masked at the alpha giving ``train_rate`` expected missingness; test at ``alpha * test_alpha_scale``."""
    template = template or MaskTemplate.default()
    schema = DatasetSchema.default(
        seed, num_modalities=spec.num_modalities, feature_dim=spec.feature_dim, **spec.schema_kwargs
    )
    train_full = generate_dataset(schema, spec.n_train, seed=10 * seed + 1)
    test_full = generate_dataset(schema, spec.n_test, seed=10 * seed + 2)
    a_train = alpha_for_rate(train_full, template, spec.train_rate, spec.maskable)
    a_test = a_train * spec.test_alpha_scale
    train = apply_mnar(train_full, template, a_train, spec.maskable, seed=10 * seed + 3)
    test = apply_mnar(test_full, template, a_test, spec.maskable, seed=10 * seed + 4)
    return Benchmark(schema, train, test, a_train, a_test, tuple(spec.maskable))
