"""Reparameterized Gaussian machinery and the training objective.

Gradients flow through posterior means and standard deviations (never
through the unit-normal draws), and the KL term treats the prior side as
a constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from smil import autodiff as ad
from smil.autodiff import Tensor


@dataclass
class GaussianSpec:
    """Diagonal Gaussian: mean and positive stddev, either in-graph or plain."""

    mean: Tensor
    std: Tensor

    def __post_init__(self):
        if not isinstance(self.mean, Tensor):
            self.mean = Tensor(self.mean)
        if not isinstance(self.std, Tensor):
            self.std = Tensor(self.std)
        if self.mean.shape != self.std.shape:
            raise ad.ShapeMismatch("gaussian_spec", self.mean.shape, self.std.shape)
        if float(self.std.data.min()) <= 0.0:
            raise ValueError("gaussian_spec: stddev must be strictly positive")

    @property
    def shape(self):
        return self.mean.shape


def unit_prior(shape, mean=0.0):
    """Fixed prior N(mean, I) as a constant spec."""
    return GaussianSpec(mean=Tensor(np.full(shape, float(mean))), std=Tensor(np.ones(shape)))


def sample_reparam(spec: GaussianSpec, stream=None, eps=None):
    """Draw = mean + std * eps with eps ~ N(0, I) from the stream.

    Returns (draw tensor, eps array); pass eps back in to replay a draw
    bit-identically. Gradients reach mean and std, not eps.
    """
    if eps is None:
        if stream is None:
            raise ValueError("sample_reparam: need a stream or frozen eps")
        eps = stream.normal(spec.shape)
    else:
        eps = np.asarray(eps, dtype=np.float64)
        if eps.shape != spec.shape:
            raise ad.ShapeMismatch("sample_reparam", spec.shape, eps.shape)
    draw = ad.add(spec.mean, ad.mul(spec.std, Tensor(eps)))
    return draw, eps


def kl_diag_gauss(q: GaussianSpec, p: GaussianSpec):
    """KL(q || p) for diagonal Gaussians, summed over all entries.

    Returns a scalar tensor; always >= 0, and 0 iff q == p. The prior p is
    treated as constant (no gradient).
    """
    if q.shape != p.shape:
        raise ad.ShapeMismatch("kl_diag_gauss", q.shape, p.shape)
    p_mean = p.mean.data
    p_std = p.std.data

    var_scale = 1.0 / (2.0 * p_std**2)
    q_var = ad.mul(q.std, q.std)
    mu_diff = ad.sub(q.mean, Tensor(p_mean))
    quad = ad.mul(ad.add(q_var, ad.mul(mu_diff, mu_diff)), Tensor(var_scale))
    log_ratio = ad.sub(Tensor(np.log(p_std)), ad.log(q.std))
    total = ad.sum_all(ad.add(ad.add(log_ratio, quad), -0.5))
    return total


@dataclass
class ObjectiveBreakdown:
    """Per-batch objective record: total = nll + kl_weight*(kl_omega + kl_r).

    KL terms are per-sample batch means against the fixed priors N(1, I)
    for the prior weights and N(0, I) for the regularizer. `loss` is the
    in-graph total for backward(); `draw_epsilons` replays the MC draws.
    """

    nll: float
    kl_omega: float
    kl_r: float
    total: float
    mc_samples: int
    loss: Tensor
    draw_epsilons: list

    def finite(self):
        return all(np.isfinite(v) for v in (self.nll, self.kl_omega, self.kl_r, self.total))


def smil_loss(
    params,
    images,
    audio,
    labels,
    priors,
    config,
    kl_weight=1.0,
    mc_samples=1,
    noise="fresh",
    stream=None,
    frozen=None,
    positive_weight=1.0,
):
    """Monte-Carlo classification objective plus KL regularization.

    For each of `mc_samples` latent draws, run the classifier and average
    the per-sample cross-entropy; add kl_weight times the per-sample-mean
    KL of the posteriors actually used. `frozen` replays stored epsilons
    (one dict per draw); noise="deterministic" uses distribution means.
    """
    from smil.networks import LatentDraws, forward_classify  # circular at module scope

    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    n = len(images)
    nll_terms, kl_omega_terms, kl_r_terms, epsilons = [], [], [], []
    for draw_idx in range(mc_samples):
        if noise == "frozen":
            draws = LatentDraws("frozen", epsilons=frozen[draw_idx])
        else:
            draws = LatentDraws(noise, stream=stream)
        logits, specs = forward_classify(params, images, audio, priors, config, draws)
        if config.multi_label:
            per_sample = ad.sigmoid_bce(logits, labels, pos_weight=positive_weight)
        else:
            per_sample = ad.softmax_cross_entropy(logits, labels)
        nll_terms.append(ad.mean_all(per_sample))
        if specs["omega"] is not None:
            kl_omega_terms.append(ad.mul(kl_diag_gauss(specs["omega"], unit_prior(specs["omega"].shape, 1.0)), 1.0 / n))
        if specs["r"] is not None:
            kl_r_terms.append(ad.mul(kl_diag_gauss(specs["r"], unit_prior(specs["r"].shape, 0.0)), 1.0 / n))
        epsilons.append(draws.epsilons)

    def average(terms):
        if not terms:
            return Tensor(0.0)
        acc = terms[0]
        for t in terms[1:]:
            acc = ad.add(acc, t)
        return ad.mul(acc, 1.0 / len(terms))

    nll = average(nll_terms)
    kl_omega = average(kl_omega_terms)
    kl_r = average(kl_r_terms)
    loss = ad.add(nll, ad.mul(ad.add(kl_omega, kl_r), kl_weight))
    return ObjectiveBreakdown(
        nll=nll.item(),
        kl_omega=kl_omega.item(),
        kl_r=kl_r.item(),
        total=loss.item(),
        mc_samples=mc_samples,
        loss=loss,
        draw_epsilons=epsilons,
    )
