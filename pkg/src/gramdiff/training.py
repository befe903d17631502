"""Branch-expanding Gumbel-Softmax training with min-over-branches BCE loss.

Every branch spawns `branching_factor` children per step, each child drawing
independent Gumbel noise; the branch set is randomly pruned back to
`max_branches`; the sequence loss is the minimum accumulated BCE over the
surviving branches and only that branch back-propagates.

For speed, sequence_loss evaluates the branch search graph-free with all
branches batched into one matrix per step, then replays just the argmin
lineage through the autodiff ops. Both passes share the same forward kernels,
so the replayed loss is bit-identical to the searched minimum (asserted).
The list-level expand_branches/prune_branches API is the reference
implementation composed from diffcore ops and is cross-checked in tests.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import grammar as gm
from .diffcore import Tensor


class NumericalError(RuntimeError):
    """Training hit a non-finite loss or parameter."""


@dataclass
class TrainConfig:
    branching_factor: int = 2
    max_branches: int = 2048
    epochs: int = 400
    learning_rate: float = 0.1
    lr_decay_every: int = 50
    lr_decay_factor: float = 10.0
    temperature: float = 1.0
    seed: int = 0
    momentum: float = 0.0
    keep_best: bool = False

    def validate(self):
        if self.branching_factor < 1:
            raise dc.ParameterError(f"branching_factor must be >= 1, got {self.branching_factor}")
        if self.max_branches < self.branching_factor:
            raise dc.ParameterError("max_branches must be >= branching_factor")
        if self.learning_rate <= 0:
            raise dc.ParameterError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.temperature <= 0:
            raise dc.ParameterError(f"temperature must be positive, got {self.temperature}")
        if self.lr_decay_every < 1:
            raise dc.ParameterError("lr_decay_every must be >= 1")
        if self.lr_decay_factor <= 0:
            raise dc.ParameterError("lr_decay_factor must be positive")
        if self.epochs < 0:
            raise dc.ParameterError(f"epochs must be >= 0, got {self.epochs}")


@dataclass
class Branch:
    """One sampling hypothesis. `noise_key` identifies the Gumbel draws the
    branch consumed, as (step, child-row) pairs within its run."""

    v: Tensor
    emitted: list = field(default_factory=list)
    loss_so_far: Tensor = None
    rule_trace: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)
    noise_key: tuple = ()


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float   # mean over sequences of per-step BCE
    lr: float


def root_branch(model: gm.GrammarModel, context=None) -> Branch:
    return Branch(v=gm.initial_nonterminal(model, context), loss_so_far=Tensor([[0.0]]))


def expand_branches(branches, model, target, b, tau=1.0, rng=None, noise=None):
    """Each branch spawns b children with independent Gumbel draws; child loss
    is the parent loss plus the BCE of the new terminal against `target`.
    Children of branch j occupy positions j*b .. j*b+b-1."""
    if not branches:
        raise ValueError("expand_branches: empty branch set")
    target = np.asarray(target, dtype=np.float64).ravel()
    rn = model.N * model.R
    count = len(branches) * b
    if noise is None:
        if rng is None:
            raise dc.ParameterError("expand_branches needs either noise or an rng")
        noise = dc.gumbel_noise(rng, (count, rn))
    else:
        noise = np.asarray(noise, dtype=np.float64).reshape(count, rn)

    children = []
    for j, parent in enumerate(branches):
        k = gm.f_rules(parent.v, model)
        t_step = len(parent.rule_trace)
        for s in range(b):
            row = j * b + s
            F = dc.gumbel_softmax(k, tau, noise=noise[row])
            v_next, w = gm.g_expand(F, model)
            step_loss = dc.bce(w, target)
            children.append(Branch(
                v=v_next,
                emitted=parent.emitted + [w],
                loss_so_far=dc.add(parent.loss_so_far, step_loss),
                rule_trace=parent.rule_trace + [int(np.argmax(F.data[0]))],
                step_losses=parent.step_losses + [step_loss.item()],
                noise_key=parent.noise_key + ((t_step, row),),
            ))
    return children


def _prune_indices(losses, cap, rng, keep_best):
    """Sorted surviving indices, or None when no pruning is needed. keep_best
    swaps the current argmin in over the worst random survivor; the rng is
    consumed identically in both modes."""
    n = len(losses)
    if n <= cap:
        return None
    keep = np.sort(rng.choice(n, size=cap, replace=False))
    if keep_best:
        best = int(np.argmin(losses))
        if not np.isin(best, keep):
            keep[int(np.argmax(losses[keep]))] = best
            keep = np.sort(keep)
    return keep


def prune_branches(branches, max_branches, rng, keep_best=False):
    """Uniform random subset of size max_branches (order preserved)."""
    losses = np.array([br.loss_so_far.item() for br in branches])
    keep = _prune_indices(losses, max_branches, rng, keep_best)
    if keep is None:
        return list(branches)
    return [branches[i] for i in keep]


def sequence_loss(model: gm.GrammarModel, targets, config: TrainConfig, rng=None,
                  context=None, noise_fn=None):
    """Min-over-branches loss for one target sequence; returns (loss tensor,
    argmin branch). Gradients flow only through the argmin branch.

    `noise_fn(step, lineages) -> array` overrides the Gumbel draws; a lineage
    is the tuple of child slots taken from the root, which makes nested-noise
    comparisons across branching factors possible in tests.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim != 2 or targets.shape[0] < 1:
        raise ValueError("sequence_loss: target sequence must be a non-empty LxT array")
    if targets.shape[1] != model.T:
        raise dc.DimensionError(f"targets have {targets.shape[1]} classes, model T={model.T}")
    if rng is None:
        rng = np.random.default_rng(config.seed)
    b, tau = config.branching_factor, config.temperature
    rn = model.N * model.R
    wc, h1, h2 = model.Wc.data, model.H1.data, model.H2.data

    v0 = gm.initial_nonterminal(model, context)
    V = v0.data
    loss = np.zeros(1)
    lineages = [()] if noise_fn is not None else None
    steps = []  # (noise matrix, prune keep indices) per step, for backtracking
    n_steps = len(targets)

    for t in range(n_steps):
        count = loss.shape[0] * b
        if noise_fn is not None:
            lineages = [lin + (s,) for lin in lineages for s in range(b)]
            noise = np.asarray(noise_fn(t, lineages), dtype=np.float64).reshape(count, rn)
        else:
            noise = dc.gumbel_noise(rng, (count, rn))
        K = np.repeat(gm.rule_activation_values(V, wc), b, axis=0)
        F = dc.softmax_rows((K + noise) / tau)
        if model.terminal_squash == "logistic":
            W = dc.sigmoid_values(F @ h2)
        else:
            W = dc.softmax_rows(F @ h2)
        loss = np.repeat(loss, b) + dc.bce_rows(W, targets[t])[:, 0]
        if t < n_steps - 1:
            V = dc.softmax_rows(F @ h1)
        keep = _prune_indices(loss, config.max_branches, rng, config.keep_best)
        if keep is not None:
            loss = loss[keep]
            if t < n_steps - 1:
                V = V[keep]
            if lineages is not None:
                lineages = [lineages[i] for i in keep]
        steps.append((noise, keep))

    best = int(np.argmin(loss))
    rows = []
    idx = best
    for noise, keep in reversed(steps):
        child = idx if keep is None else int(keep[idx])
        rows.append(child)
        idx = child // b
    rows.reverse()

    # replay only the argmin lineage through the graph
    v, total = v0, None
    emitted, trace, step_losses, key = [], [], [], []
    for t, row in enumerate(rows):
        k = gm.f_rules(v, model)
        F = dc.gumbel_softmax(k, tau, noise=steps[t][0][row])
        v, w = gm.g_expand(F, model)
        step_loss = dc.bce(w, targets[t])
        total = step_loss if total is None else dc.add(total, step_loss)
        emitted.append(w)
        trace.append(int(np.argmax(F.data[0])))
        step_losses.append(step_loss.item())
        key.append((t, row))
    assert total.data[0, 0] == loss[best], "replayed loss diverged from searched minimum"
    branch = Branch(v=v, emitted=emitted, loss_so_far=total, rule_trace=trace,
                    step_losses=step_losses, noise_key=tuple(key))
    return total, branch


def sgd_update(params, grads, lr, momentum=0.0, velocity=None):
    """p <- p - lr * g elementwise; optional heavy-ball momentum."""
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise dc.DimensionError(f"sgd_update: grad shape {g.shape} vs param {p.data.shape}")
        if momentum > 0.0 and velocity is not None:
            velocity[i] *= momentum
            velocity[i] += g
            g = velocity[i]
        p.data = p.data - lr * g


def _first_nonfinite(model):
    for name, p in model.parameters():
        if not np.isfinite(p.data).all():
            return name
    return None


def train(model: gm.GrammarModel, records, config: TrainConfig):
    """SGD over per-sequence min-branch losses; mutates the model in place and
    returns per-epoch statistics. Deterministic given (seed, config, dataset)."""
    config.validate()
    if not records:
        raise ValueError("train: dataset is empty")
    for rec in records:
        if rec.targets.shape[1] != model.T:
            raise dc.DimensionError(
                f"record {rec.id}: {rec.targets.shape[1]} classes, model T={model.T}")
    rng = np.random.default_rng(config.seed)
    velocity = [np.zeros_like(p.data) for _, p in model.parameters()]
    report = []
    lr = config.learning_rate
    for epoch in range(config.epochs):
        if epoch > 0 and epoch % config.lr_decay_every == 0:
            lr = lr / config.lr_decay_factor
        per_step_losses = []
        for idx in rng.permutation(len(records)):
            rec = records[idx]
            model.zero_grad()
            loss, _ = sequence_loss(model, rec.targets, config, rng=rng, context=rec.context)
            value = loss.item()
            if not np.isfinite(value):
                culprit = _first_nonfinite(model) or "loss"
                raise NumericalError(
                    f"non-finite loss in epoch {epoch + 1}; first non-finite value: {culprit}")
            dc.backward(loss)
            params = model.parameters()
            sgd_update([p for _, p in params], [dc.grad_or_zeros(p) for _, p in params],
                       lr, momentum=config.momentum, velocity=velocity)
            per_step_losses.append(value / len(rec.targets))
        report.append(EpochStats(epoch + 1, float(np.mean(per_step_losses)), lr))
    return report


def write_report_csv(report, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "mean_loss", "lr"])
        for row in report:
            writer.writerow([row.epoch, repr(row.mean_loss), repr(row.lr)])
