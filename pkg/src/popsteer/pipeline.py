"""Shared evaluation harness and the neuron analysis run."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import sae as S
from .baselines import ipr_rescale, noise_ablation, random_baseline, random_select_ablation
from .encoder import encode_batch
from .fairmetrics import MetricsReport, evaluate_lists
from .neuronlab import (
    NeuronProfile,
    RunningStats,
    activation_stats,
    head_shares,
    manipulation_study,
    normality_diagnostics,
    select_neurons,
    top_activator_report,
)
from .ranking import mask_history, rank_users, topk_indices
from .steer import SteeringConfig, compute_plan, decode_hidden, steer_hidden
from .synthgen import iter_profiles

METHODS = ("base", "sae", "popsteer", "random", "ipr", "noise", "randomselect")


def user_embeddings(encoder, sequences, batch: int = 1024) -> np.ndarray:
    return encode_batch(encoder, sequences, batch=batch)


class Evaluator:
    """Ranks every user of one split stage under a method and scores the lists.

    User embeddings and SAE hidden activations are computed once and reused.
    """

    def __init__(self, split, partition, encoder, sae=None, profile: NeuronProfile | None = None,
                 stage: str = "test", k: int = 10, batch: int = 1024):
        self.split, self.partition, self.encoder, self.sae, self.profile = split, partition, encoder, sae, profile
        self.k, self.batch = k, batch
        self.histories = split.history(stage)
        self.targets = split.targets(stage)
        self.X = user_embeddings(encoder, self.histories, batch)
        self._Z = None

    @property
    def n_items(self) -> int:
        return self.encoder.n_items

    @property
    def item_table(self) -> np.ndarray:
        return self.encoder.item_embeddings

    @property
    def Z(self) -> np.ndarray:
        if self._Z is None:
            self._Z = S.encode(self.sae, self.X)
        return self._Z

    def report(self, lists) -> MetricsReport:
        return evaluate_lists(lists, self.targets, self.n_items, self.partition, self.k)

    def lists_from_embeddings(self, X: np.ndarray, k: int | None = None):
        return rank_users(self.item_table, X, self.histories, self.k if k is None else k)

    def lists_from_hidden(self, Z: np.ndarray):
        return self.lists_from_embeddings(decode_hidden(self.sae, Z))

    def _plan(self, cfg: SteeringConfig):
        return compute_plan(self.profile.d, self.profile.std_real, cfg)

    # ------------------------------------------------------------ methods

    def base(self):
        return self.lists_from_embeddings(self.X)

    def sae_recon(self):
        return self.lists_from_hidden(self.Z)

    def popsteer(self, alpha_pop: float, alpha_unpop: float, beta: float):
        plan = self._plan(SteeringConfig(alpha_pop, alpha_unpop, beta))
        return self.lists_from_hidden(steer_hidden(self.Z, plan))

    def randomselect(self, alpha_pop: float, alpha_unpop: float, beta: float, seed: int = 0):
        plan = random_select_ablation(self.profile.d, self.profile.std_real,
                                      SteeringConfig(alpha_pop, alpha_unpop, beta), seed)
        return self.lists_from_hidden(steer_hidden(self.Z, plan))

    def noise(self, beta: float, xi: float, seed: int = 0):
        selected = self._plan(SteeringConfig(1.0, 1.0, beta)).steered
        return self.lists_from_hidden(noise_ablation(self.Z, selected, xi, seed))

    def random(self, t: int = 50, seed: int = 0):
        long = self.lists_from_embeddings(self.X, k=t)
        rng = np.random.default_rng(seed)
        return [random_baseline(l, min(self.k, len(l)), rng=rng) for l in long]

    def ipr(self, alpha: float, t: int = 250):
        counts = self.partition.counts
        out = []
        for s in range(0, len(self.X), self.batch):
            scores = mask_history(self.X[s:s + self.batch] @ self.item_table.T, self.histories[s:s + self.batch])
            long = topk_indices(scores, min(t, self.n_items))
            sub = np.take_along_axis(scores, long, axis=1)
            adj = np.where(np.isfinite(sub), ipr_rescale(sub, counts[long], alpha, counts.max()), -np.inf)
            order = np.lexsort((long, -adj), axis=1)[:, : self.k]
            top = np.take_along_axis(long, order, axis=1)
            keep = np.isfinite(np.take_along_axis(adj, order, axis=1))
            out.extend(row[m] for row, m in zip(top, keep))
        return out

    def run(self, method: str, **hp) -> tuple[MetricsReport, float]:
        fn = {
            "base": self.base,
            "sae": self.sae_recon,
            "popsteer": self.popsteer,
            "random": self.random,
            "ipr": self.ipr,
            "noise": self.noise,
            "randomselect": self.randomselect,
        }[method]
        t0 = time.perf_counter()
        lists = fn(**hp)
        seconds = time.perf_counter() - t0
        return self.report(lists), seconds


# ---------------------------------------------------------------- analysis


@dataclass
class AnalysisResult:
    profile: NeuronProfile
    normality: object
    top_pos: object
    top_neg: object
    curves: dict = field(default_factory=dict)
    real_activations: np.ndarray | None = field(default=None, repr=False)


def neuron_profile(split, partition, encoder, sae, n_prime: int, M: int, seed: int, epoch_size: int = 2048,
                   batch: int = 1024):
    """Cohen's d from synthetic Pop/Unpop populations plus real-user activation stats."""
    pop = activation_stats(sae, encoder, iter_profiles(partition, "Pop", n_prime, M, seed, epoch_size), batch)
    unpop = activation_stats(sae, encoder, iter_profiles(partition, "Unpop", n_prime, M, seed, epoch_size), batch)
    Z_real = S.encode(sae, user_embeddings(encoder, list(split.train), batch))
    real = RunningStats(sae.n_hidden).update(Z_real)
    return NeuronProfile.from_stats(pop, unpop, real), Z_real


def analyze(split, partition, encoder, sae, n_prime: int, M: int, seed: int, K_prime: int = 20,
            k: int = 10, top_n: int = 10, threshold: float = 1.0, evaluator: Evaluator | None = None) -> AnalysisResult:
    profile, Z_real = neuron_profile(split, partition, encoder, sae, n_prime, M, seed)
    normality = normality_diagnostics(Z_real)
    shares = head_shares(split.train, partition)
    j_pos = int(np.argmax(profile.d))
    j_neg = int(np.argmin(profile.d))
    top_pos = top_activator_report(j_pos, Z_real, shares, top_n)
    top_neg = top_activator_report(j_neg, Z_real, shares, top_n)
    ev = evaluator or Evaluator(split, partition, encoder, sae, profile, "test", k)
    curves = {}
    for sign in ("pos", "neg"):
        kp = min(K_prime, len(select_neurons(profile.d, sign, threshold)))
        curves[sign] = manipulation_study(sae, ev.item_table, ev.X, ev.histories, profile, kp, sign, k,
                                          metrics=lambda lists: ev.report(lists).as_dict(), threshold=threshold)
    return AnalysisResult(profile, normality, top_pos, top_neg, curves, Z_real)
