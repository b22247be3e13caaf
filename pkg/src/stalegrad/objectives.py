"""Synthetic objective families with closed-form constants.

Four families are provided, all cheap enough to evaluate exactly:

* :class:`Quadratic` — f(x) = ½xᵀAx − bᵀx, positive definite A.
* :class:`Mixture` — a weighted sum of quadratics; the first component is
  the rare "slow" one, its weight matching the delay model's slow_weight.
* :class:`NonconvexQuadratic` — a quadratic plus a bounded coordinatewise
  squash, lower bounded with a hand-derived smoothness constant.
* :class:`Logistic` — multinomial cross-entropy on a synthetic dataset,
  with samples split into a slow and a fast group.

Stochastic gradients follow one sampling scheme everywhere: the delay model
fixes the component tag, the objective adds isotropic Gaussian noise with
per-coordinate standard deviation ``noise_sigma/√d`` (so the expected
squared noise norm is exactly ``noise_sigma²``).  When an update rule needs
gradients at two points from one sample, both evaluations share the same
component and the same noise vector, so their difference is noise-free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np

from .errors import ContractViolationError, InvalidConfigError, UnsupportedObjectiveError

Array = np.ndarray

#: component tags used by the delay model and recorded in traces
SLOW, FAST = "slow", "fast"


def _freeze(a: Array) -> Array:
    out = np.array(a, dtype=np.float64)
    out.flags.writeable = False
    return out


def _check_dim(x: Array, dim: int) -> Array:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (dim,):
        raise ContractViolationError(f"expected a vector of shape ({dim},), got {x.shape}")
    return x


@dataclass(frozen=True)
class TheoryConstants:
    """Closed-form problem constants consumed by step-size calculators.

    Fields without a closed form for the given objective are ``None``
    (e.g. the logistic family exposes only a smoothness bound).
    """

    lipschitz: float
    sigma: float | None
    sigma_l: float | None
    delta_gap: float | None
    minimizer: Array | None
    f_star: float | None


@dataclass(frozen=True)
class BallDomain:
    """Euclidean ball; the feasible set for projected methods.

    The diameter ``D = 2·radius`` enters the step-size window of the
    averaged projected method.
    """

    center: Array
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", _freeze(np.atleast_1d(self.center)))
        if not self.radius > 0:
            raise InvalidConfigError("radius must be positive", field="objective.domain.radius")

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    @property
    def diameter(self) -> float:
        return 2.0 * self.radius

    def contains(self, x: Array, tol: float = 1e-12) -> bool:
        return float(np.linalg.norm(np.asarray(x) - self.center)) <= self.radius + tol

    def project(self, x: Array) -> Array:
        """Orthogonal projection: x itself inside the ball, else radial scaling.

        The scale factor is re-tightened against the *original* offset until
        rounding leaves the point genuinely inside, and it strictly decreases
        every pass (the ``nextafter`` floor), so the loop always terminates —
        even when the ball is many orders of magnitude smaller than its
        center coordinates.  The output satisfies the same containment test
        the identity branch uses, which makes the projection exactly
        idempotent.
        """
        out = _check_dim(x, self.dim)
        offset = out - self.center
        dist = float(np.linalg.norm(offset))
        if dist <= self.radius:
            return out
        scale = self.radius / dist
        candidate = self.center + scale * offset
        dist = float(np.linalg.norm(candidate - self.center))
        while dist > self.radius:
            scale = min(scale * (self.radius / dist), math.nextafter(scale, 0.0))
            candidate = self.center + scale * offset
            dist = float(np.linalg.norm(candidate - self.center))
        return candidate


class _NoiseModel:
    """Shared stochastic-gradient scheme; see the module docstring."""

    # subclasses provide: dim, noise_sigma, component_grad, num_components

    def component_for(self, tag: str) -> int:
        """Map a delay-model component tag to a component index."""
        if tag not in (SLOW, FAST):
            raise ContractViolationError(f"unknown component tag {tag!r}")
        if self.num_components == 1:
            return 0
        return 0 if tag == SLOW else 1

    def _noise(self, rng: np.random.Generator) -> Array:
        if self.noise_sigma == 0.0:
            return np.zeros(self.dim)
        return (self.noise_sigma / math.sqrt(self.dim)) * rng.standard_normal(self.dim)

    def stochastic_grad(self, x: Array, component: int, rng: np.random.Generator) -> Array:
        """One noisy gradient at x for the given (already drawn) component."""
        return self.component_grad(x, component) + self._noise(rng)

    def stochastic_grad_pair(
        self, x: Array, x_prev: Array, component: int, rng: np.random.Generator
    ) -> tuple[Array, Array]:
        """Gradients at x and x_prev sharing one sample (component and noise)."""
        noise = self._noise(rng)
        return (
            self.component_grad(x, component) + noise,
            self.component_grad(x_prev, component) + noise,
        )


def _as_matrix(curvature: Any, dim: int) -> Array:
    """Build a symmetric PD curvature matrix from a scalar, diagonal, or full form."""
    a = np.asarray(curvature, dtype=np.float64)
    if a.ndim == 0:
        a = float(a) * np.eye(dim)
    elif a.ndim == 1:
        if a.shape != (dim,):
            raise InvalidConfigError(f"diagonal curvature needs {dim} entries, got {a.shape[0]}")
        a = np.diag(a)
    elif a.shape != (dim, dim):
        raise InvalidConfigError(f"curvature matrix must be {dim}x{dim}, got {a.shape}")
    if not np.allclose(a, a.T, rtol=0, atol=1e-12):
        raise InvalidConfigError("curvature matrix must be symmetric")
    if np.linalg.eigvalsh(a)[0] <= 0:
        raise InvalidConfigError("curvature matrix must be positive definite")
    return a


@dataclass(frozen=True)
class Quadratic(_NoiseModel):
    """f(x) = ½xᵀAx − bᵀx with symmetric positive definite A."""

    matrix: Array
    offset: Array
    noise_sigma: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "offset", _freeze(np.atleast_1d(self.offset)))
        object.__setattr__(self, "matrix", _freeze(_as_matrix(self.matrix, self.offset.shape[0])))
        if self.noise_sigma < 0:
            raise InvalidConfigError("noise_sigma must be nonnegative", field="objective.noise_sigma")

    @property
    def dim(self) -> int:
        return self.offset.shape[0]

    @property
    def num_components(self) -> int:
        return 1

    def loss(self, x: Array) -> float:
        x = _check_dim(x, self.dim)
        return float(0.5 * x @ self.matrix @ x - self.offset @ x)

    def grad(self, x: Array) -> Array:
        x = _check_dim(x, self.dim)
        return self.matrix @ x - self.offset

    def component_grad(self, x: Array, component: int) -> Array:
        return self.grad(x)

    @property
    def minimizer(self) -> Array:
        return np.linalg.solve(self.matrix, self.offset)

    def theory_constants(self, x_init: Array | None = None) -> TheoryConstants:
        x1 = np.zeros(self.dim) if x_init is None else _check_dim(x_init, self.dim)
        m = self.minimizer
        f_star = self.loss(m)
        return TheoryConstants(
            lipschitz=float(np.linalg.eigvalsh(self.matrix)[-1]),
            sigma=self.noise_sigma,
            sigma_l=0.0,
            delta_gap=self.loss(x1) - f_star,
            minimizer=m,
            f_star=f_star,
        )


@dataclass(frozen=True)
class Mixture(_NoiseModel):
    """Weighted sum of quadratics; component 0 is the slow one.

    The full gradient is the weight-averaged component gradient, and the
    minimizer solves (Σ q_c A_c) x = Σ q_c b_c in closed form.
    """

    components: tuple[Quadratic, ...]
    weights: tuple[float, ...]
    noise_sigma: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if len(self.components) != len(self.weights) or not self.components:
            raise InvalidConfigError("components and weights must be nonempty and aligned")
        if any(not 0 < w < 1 for w in self.weights) or abs(sum(self.weights) - 1.0) > 1e-12:
            raise InvalidConfigError("weights must lie in (0,1) and sum to 1", field="objective.weights")
        dims = {c.dim for c in self.components}
        if len(dims) != 1:
            raise InvalidConfigError("all components must share one dimension")
        if self.noise_sigma < 0:
            raise InvalidConfigError("noise_sigma must be nonnegative", field="objective.noise_sigma")

    @property
    def dim(self) -> int:
        return self.components[0].dim

    @property
    def num_components(self) -> int:
        return len(self.components)

    def loss(self, x: Array) -> float:
        return float(sum(w * c.loss(x) for w, c in zip(self.weights, self.components)))

    def grad(self, x: Array) -> Array:
        x = _check_dim(x, self.dim)
        out = np.zeros(self.dim)
        for w, c in zip(self.weights, self.components):
            out += w * c.grad(x)
        return out

    def component_grad(self, x: Array, component: int) -> Array:
        return self.components[component].grad(x)

    @property
    def mean_matrix(self) -> Array:
        out = np.zeros((self.dim, self.dim))
        for w, c in zip(self.weights, self.components):
            out += w * c.matrix
        return out

    @property
    def minimizer(self) -> Array:
        mean_offset = np.zeros(self.dim)
        for w, c in zip(self.weights, self.components):
            mean_offset += w * c.offset
        return np.linalg.solve(self.mean_matrix, mean_offset)

    def theory_constants(self, x_init: Array | None = None) -> TheoryConstants:
        x1 = np.zeros(self.dim) if x_init is None else _check_dim(x_init, self.dim)
        m = self.minimizer
        f_star = self.loss(m)
        # The sample functions must be as smooth as the mean, so the
        # certificate is the largest component curvature (it dominates the
        # weighted average).
        lipschitz = max(float(np.linalg.eigvalsh(c.matrix)[-1]) for c in self.components)
        mean_a = self.mean_matrix
        equal_curvature = all(
            np.allclose(c.matrix, self.components[0].matrix, rtol=0, atol=1e-12)
            for c in self.components
        )
        sigma: float | None = None
        if equal_curvature:
            # Component gradients then differ from the mean by the constant
            # b̄ − b_c, so the gradient variance is the same at every x.
            mean_offset = sum(w * c.offset for w, c in zip(self.weights, self.components))
            spread = sum(
                w * float(np.linalg.norm(c.offset - mean_offset) ** 2)
                for w, c in zip(self.weights, self.components)
            )
            sigma = math.sqrt(self.noise_sigma**2 + spread)
        second_moment = np.zeros((self.dim, self.dim))
        for w, c in zip(self.weights, self.components):
            diff = c.matrix - mean_a
            second_moment += w * (diff @ diff)
        sigma_l = math.sqrt(max(0.0, float(np.linalg.eigvalsh(second_moment)[-1])))
        return TheoryConstants(
            lipschitz=lipschitz,
            sigma=sigma,
            sigma_l=sigma_l,
            delta_gap=self.loss(x1) - f_star,
            minimizer=m,
            f_star=f_star,
        )


def squash(u: Array) -> Array:
    """Coordinatewise u²/(1+u²): bounded, zero at 0, second derivative in [−½, 2]."""
    u2 = np.square(u)
    return u2 / (1.0 + u2)


def squash_deriv(u: Array) -> Array:
    return 2.0 * u / np.square(1.0 + np.square(u))


@dataclass(frozen=True)
class NonconvexQuadratic(_NoiseModel):
    """A quadratic plus a bounded coordinatewise distortion.

    f(x) = ½xᵀAx − bᵀx + scale·Σᵢ s(xᵢ − mᵢ) with s(u) = u²/(1+u²) and m the
    quadratic's minimizer.  Both terms are minimized at m, so the global
    minimizer and f* stay in closed form, and since s'' ∈ [−½, 2] with
    s''(0) = 2 the gradient-Lipschitz constant is exactly
    λ_max(A) + 2·scale (attained at m).
    """

    base: Quadratic
    squash_scale: float
    noise_sigma: float = 0.0

    def __post_init__(self):
        if not self.squash_scale > 0:
            raise InvalidConfigError("squash_scale must be positive", field="objective.squash_scale")
        if self.noise_sigma < 0:
            raise InvalidConfigError("noise_sigma must be nonnegative", field="objective.noise_sigma")

    @property
    def dim(self) -> int:
        return self.base.dim

    @property
    def num_components(self) -> int:
        return 1

    @property
    def minimizer(self) -> Array:
        return self.base.minimizer

    def loss(self, x: Array) -> float:
        x = _check_dim(x, self.dim)
        return self.base.loss(x) + self.squash_scale * float(np.sum(squash(x - self.minimizer)))

    def grad(self, x: Array) -> Array:
        x = _check_dim(x, self.dim)
        return self.base.grad(x) + self.squash_scale * squash_deriv(x - self.minimizer)

    def component_grad(self, x: Array, component: int) -> Array:
        return self.grad(x)

    def theory_constants(self, x_init: Array | None = None) -> TheoryConstants:
        x1 = np.zeros(self.dim) if x_init is None else _check_dim(x_init, self.dim)
        m = self.minimizer
        f_star = self.base.loss(m)
        return TheoryConstants(
            lipschitz=float(np.linalg.eigvalsh(self.base.matrix)[-1]) + 2.0 * self.squash_scale,
            sigma=self.noise_sigma,
            sigma_l=0.0,
            delta_gap=self.loss(x1) - f_star,
            minimizer=m,
            f_star=f_star,
        )


@dataclass(frozen=True)
class Logistic(_NoiseModel):
    """Multinomial cross-entropy over a fixed dataset split into two groups.

    Parameters are a flattened C×d weight matrix.  The loss is the
    group-weighted mean of per-group mean losses, so the slow group's
    weight matches its sampling probability under the delay model.

    The documented smoothness bound is L = (C−1)/C · maxᵢ‖φᵢ‖²: every
    per-sample Hessian is (diag(p) − ppᵀ) ⊗ φφᵀ and λ_max(diag(p) − ppᵀ)
    ≤ ½ ≤ (C−1)/C for C ≥ 2.  No closed-form minimizer exists, so only the
    smoothness constant and the noise level are reported.
    """

    features: Array
    labels: Array
    group_of: Array  # 0 = slow, 1 = fast, per sample
    group_weights: tuple[float, float]
    num_classes: int
    noise_sigma: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "features", _freeze(np.atleast_2d(self.features)))
        labels = np.asarray(self.labels, dtype=np.int64)
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)
        groups = np.asarray(self.group_of, dtype=np.int64)
        groups.flags.writeable = False
        object.__setattr__(self, "group_of", groups)
        object.__setattr__(self, "group_weights", tuple(float(w) for w in self.group_weights))
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.group_of.shape != (n,):
            raise InvalidConfigError("labels and group tags must have one entry per sample")
        if self.num_classes < 2 or self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise InvalidConfigError("labels must index into num_classes >= 2")
        if set(np.unique(self.group_of)) - {0, 1}:
            raise InvalidConfigError("group tags must be 0 (slow) or 1 (fast)")
        if abs(sum(self.group_weights) - 1.0) > 1e-12 or min(self.group_weights) <= 0:
            raise InvalidConfigError("group weights must be positive and sum to 1")

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def dim(self) -> int:
        return self.num_classes * self.feature_dim

    @property
    def num_components(self) -> int:
        return 2

    def _log_softmax(self, x: Array) -> Array:
        weights = x.reshape(self.num_classes, self.feature_dim)
        logits = self.features @ weights.T
        shifted = logits - logits.max(axis=1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def _group_rows(self, component: int) -> Array:
        return np.flatnonzero(self.group_of == component)

    def loss(self, x: Array) -> float:
        x = _check_dim(x, self.dim)
        log_probs = self._log_softmax(x)
        per_sample = -log_probs[np.arange(self.labels.shape[0]), self.labels]
        return float(
            sum(
                w * per_sample[self._group_rows(c)].mean()
                for c, w in enumerate(self.group_weights)
            )
        )

    def component_grad(self, x: Array, component: int) -> Array:
        x = _check_dim(x, self.dim)
        rows = self._group_rows(component)
        probs = np.exp(self._log_softmax(x))[rows]
        residual = probs
        residual[np.arange(rows.shape[0]), self.labels[rows]] -= 1.0
        return (residual.T @ self.features[rows] / rows.shape[0]).ravel()

    def grad(self, x: Array) -> Array:
        out = np.zeros(self.dim)
        for c, w in enumerate(self.group_weights):
            out += w * self.component_grad(x, c)
        return out

    def predictions(self, x: Array) -> Array:
        x = _check_dim(x, self.dim)
        weights = x.reshape(self.num_classes, self.feature_dim)
        return np.argmax(self.features @ weights.T, axis=1)

    def theory_constants(self, x_init: Array | None = None) -> TheoryConstants:
        max_row_sq = float(np.max(np.sum(np.square(self.features), axis=1)))
        frac = (self.num_classes - 1) / self.num_classes
        return TheoryConstants(
            lipschitz=frac * max_row_sq,
            sigma=self.noise_sigma,
            sigma_l=None,
            delta_gap=None,
            minimizer=None,
            f_star=None,
        )


def make_logistic(
    num_classes: int,
    feature_dim: int,
    num_samples: int,
    slow_weight: float,
    separation: float = 2.0,
    data_seed: int = 0,
    noise_sigma: float = 0.0,
) -> Logistic:
    """Generate a Gaussian-blob classification dataset.

    The slow group holds round(n·slow_weight) samples, all from the last
    class (the rare, hard class); the fast group cycles over the others.
    """
    if num_classes < 2:
        raise InvalidConfigError("need at least two classes", field="objective.classes")
    rng = np.random.default_rng(data_seed)
    means = separation * rng.standard_normal((num_classes, feature_dim))
    n_slow = max(1, round(num_samples * slow_weight))
    if n_slow >= num_samples:
        raise InvalidConfigError("slow group would swallow the dataset", field="objective.samples")
    labels = np.concatenate(
        [
            np.full(n_slow, num_classes - 1),
            np.arange(num_samples - n_slow) % (num_classes - 1),
        ]
    )
    groups = np.concatenate([np.zeros(n_slow, np.int64), np.ones(num_samples - n_slow, np.int64)])
    features = means[labels] + rng.standard_normal((num_samples, feature_dim))
    return Logistic(
        features=features,
        labels=labels,
        group_of=groups,
        group_weights=(slow_weight, 1.0 - slow_weight),
        num_classes=num_classes,
        noise_sigma=noise_sigma,
    )


def _quadratic_from_spec(spec: Mapping[str, Any], noise_sigma: float) -> Quadratic:
    dim = spec.get("dim")
    if "offset" in spec:
        offset = np.asarray(spec["offset"], dtype=np.float64)
    elif "minimizer" in spec:
        target = np.asarray(spec["minimizer"], dtype=np.float64)
        matrix = _as_matrix(spec.get("curvature", spec.get("matrix", 1.0)), target.shape[0])
        return Quadratic(matrix=matrix, offset=matrix @ target, noise_sigma=noise_sigma)
    elif dim is not None:
        offset = np.zeros(int(dim))
    else:
        raise InvalidConfigError("quadratic needs offset, minimizer, or dim", field="objective")
    matrix = _as_matrix(spec.get("curvature", spec.get("matrix", 1.0)), offset.shape[0])
    return Quadratic(matrix=matrix, offset=offset, noise_sigma=noise_sigma)


def from_spec(spec: Mapping[str, Any], slow_weight: float):
    """Build an objective from its config-document form.

    ``slow_weight`` comes from the delay section; mixtures and the logistic
    family must agree with it so the realized sampling proportions match
    the objective's weights.
    """
    family = spec.get("family")
    noise_sigma = float(spec.get("noise_sigma", 0.0))
    if family == "quadratic":
        return _quadratic_from_spec(spec, noise_sigma)
    if family == "mixture":
        raw = spec.get("components")
        if not raw or len(raw) < 2:
            raise InvalidConfigError("mixture needs >= 2 components", field="objective.components")
        components = tuple(_quadratic_from_spec(c, 0.0) for c in raw)
        weights = spec.get("weights")
        if weights is None:
            if len(components) != 2:
                raise InvalidConfigError(
                    "weights required for mixtures with more than two components",
                    field="objective.weights",
                )
            weights = (slow_weight, 1.0 - slow_weight)
        weights = tuple(float(w) for w in weights)
        if abs(weights[0] - slow_weight) > 1e-12:
            raise InvalidConfigError(
                "first mixture weight must equal delay.slow_weight "
                "(component 0 is the slow component)",
                field="objective.weights",
            )
        return Mixture(components=components, weights=weights, noise_sigma=noise_sigma)
    if family == "nonconvex":
        base = _quadratic_from_spec(spec, 0.0)
        return NonconvexQuadratic(
            base=base,
            squash_scale=float(spec.get("squash_scale", 1.0)),
            noise_sigma=noise_sigma,
        )
    if family == "logistic":
        return make_logistic(
            num_classes=int(spec.get("classes", 3)),
            feature_dim=int(spec.get("feature_dim", 4)),
            num_samples=int(spec.get("samples", 200)),
            slow_weight=slow_weight,
            separation=float(spec.get("separation", 2.0)),
            data_seed=int(spec.get("data_seed", 0)),
            noise_sigma=noise_sigma,
        )
    raise InvalidConfigError(f"unknown objective family {family!r}", field="objective.family")


def domain_from_spec(spec: Mapping[str, Any]) -> BallDomain | None:
    """Read the optional feasible-ball description out of an objective spec."""
    raw = spec.get("domain")
    if raw is None:
        return None
    if "radius" not in raw:
        raise InvalidConfigError("domain needs a radius", field="objective.domain.radius")
    dim = spec.get("dim")
    center = raw.get("center")
    if center is None:
        if dim is None:
            raise InvalidConfigError(
                "domain needs an explicit center when the objective has no dim field",
                field="objective.domain.center",
            )
        center = np.zeros(int(dim))
    return BallDomain(center=np.asarray(center, dtype=np.float64), radius=float(raw["radius"]))
