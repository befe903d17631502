"""Differentiable regular-grammar model.

The model keeps N soft non-terminal states, R production rules per state and
T-dimensional terminal vectors. A step maps the current soft state v to rule
activations k = v . inflate(Wc), turns them into a (possibly Gumbel-perturbed)
soft rule selection F, and expands F into the next state softmax(F H1) and a
terminal squash(F H2). The model is immutable during forward evaluation;
optimizer updates need exclusive access.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

CHECKPOINT_VERSION = 1
INIT_SCALE = 0.1


class ConfigurationError(ValueError):
    """Model is missing a component required by the requested operation."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed or has an unsupported version."""


class GrammarModel:
    """Learnable parameters: Wc (NxR rule logits), H1 (RN x N next-state
    logits), H2 (RN x T terminal logits), start logits (1xN) and an optional
    context-to-start map psi (DxN)."""

    def __init__(self, N, R, T, D=None, seed=0, terminal_squash="logistic"):
        if min(N, R, T) < 1:
            raise dc.ParameterError(f"dims must be positive, got N={N} R={R} T={T}")
        if terminal_squash not in ("logistic", "softmax"):
            raise dc.ParameterError(f"unknown terminal squash {terminal_squash!r}")
        self.N, self.R, self.T, self.D = N, R, T, D
        self.terminal_squash = terminal_squash
        rng = np.random.default_rng(seed)
        self.Wc = dc.parameter(None, rng, (N, R), INIT_SCALE)
        self.H1 = dc.parameter(None, rng, (R * N, N), INIT_SCALE)
        self.H2 = dc.parameter(None, rng, (R * N, T), INIT_SCALE)
        self.start_logits = dc.parameter(None, rng, (1, N), INIT_SCALE)
        self.psi = dc.parameter(None, rng, (D, N), INIT_SCALE) if D else None

    def parameters(self):
        named = [("Wc", self.Wc), ("H1", self.H1), ("H2", self.H2),
                 ("start_logits", self.start_logits)]
        if self.psi is not None:
            named.append(("psi", self.psi))
        return named

    def zero_grad(self):
        for _, p in self.parameters():
            p.grad = None


def inflate_block_diagonal(Wc: Tensor) -> Tensor:
    """N x (R*N) block-diagonal inflation: row i holds Wc row i in columns
    [i*R, i*R+R), zeros elsewhere. Gradients route back to Wc entries only;
    the zeros are structural."""
    n, r = Wc.shape
    rows = np.arange(n)[:, None]
    cols = np.arange(r)[None, :] + (np.arange(n) * r)[:, None]
    out = np.zeros((n, r * n))
    out[rows, cols] = Wc.data
    t = Tensor(out, _parents=(Wc,))
    t._bwd = lambda g: (g[rows, cols],)
    return t


def f_rules(v: Tensor, model: GrammarModel) -> Tensor:
    """Rule activations k = v . inflate(Wc), evaluated blockwise.

    Equals matmul(v, inflate_block_diagonal(Wc)) entry for entry; the
    inflation is skipped because every off-block product is exactly zero.
    """
    if v.shape[1] != model.N:
        raise dc.DimensionError(f"f_rules: state has {v.shape[1]} entries, model N={model.N}")
    wc = model.Wc
    m = v.shape[0]
    out = Tensor((v.data[:, :, None] * wc.data[None, :, :]).reshape(m, model.N * model.R),
                 _parents=(v, wc))

    def bwd(g):
        g3 = g.reshape(m, model.N, model.R)
        dv = np.einsum("mnr,nr->mn", g3, wc.data)
        dw = np.einsum("mnr,mn->nr", g3, v.data)
        return dv, dw

    out._bwd = bwd
    return out


def rule_activation_values(v_values: np.ndarray, wc_values: np.ndarray) -> np.ndarray:
    """Graph-free twin of f_rules for batched search passes."""
    m, n = v_values.shape
    r = wc_values.shape[1]
    return (v_values[:, :, None] * wc_values[None, :, :]).reshape(m, n * r)


def g_expand(F: Tensor, model: GrammarModel):
    """Expand a soft rule selection into (next state, terminal vector)."""
    if F.shape[1] != model.N * model.R:
        raise dc.DimensionError(f"g_expand: selection has {F.shape[1]} entries, "
                                f"model R*N={model.N * model.R}")
    v_next = dc.softmax(dc.matmul(F, model.H1))
    w_logits = dc.matmul(F, model.H2)
    if model.terminal_squash == "logistic":
        w = dc.sigmoid(w_logits)
    else:
        w = dc.softmax(w_logits)
    return v_next, w


def step(v: Tensor, model: GrammarModel, mode="deterministic", tau=1.0,
         noise=None, rng=None):
    """One generation step; returns (next state, terminal, rule selection F).

    Deterministic mode is the sampled mode with all-zero noise, so the two are
    bit-identical at equal temperature when zero noise is supplied explicitly.
    """
    if mode not in ("deterministic", "sampled"):
        raise dc.ParameterError(f"unknown step mode {mode!r}")
    k = f_rules(v, model)
    if mode == "deterministic":
        noise = np.zeros(k.shape)
    F = dc.gumbel_softmax(k, tau, noise=noise, rng=rng)
    v_next, w = g_expand(F, model)
    return v_next, w, F


def initial_nonterminal(model: GrammarModel, context=None) -> Tensor:
    """Soft starting state: softmax(start logits), or softmax(context . psi)."""
    if context is None:
        return dc.softmax(model.start_logits)
    if model.psi is None:
        raise ConfigurationError("context given but the model has no psi map (D unset)")
    ctx = context if isinstance(context, Tensor) else Tensor(context)
    if ctx.shape[1] != model.D:
        raise dc.DimensionError(f"context has {ctx.shape[1]} entries, model D={model.D}")
    return dc.softmax(dc.matmul(ctx, model.psi))


@dataclass
class GenerationResult:
    terminals: np.ndarray          # L x T
    states: np.ndarray             # (L+1) x N soft states, v0 first
    rules: list = field(default_factory=list)  # argmax rule index per step


def generate(model: GrammarModel, length, mode="deterministic", seed=None,
             tau=1.0, context=None, rng=None) -> GenerationResult:
    """Roll the model forward for `length` steps from the initial state."""
    if length < 1:
        raise dc.ParameterError(f"length must be >= 1, got {length}")
    if rng is None:
        rng = np.random.default_rng(seed)
    v = initial_nonterminal(model, context)
    terminals, states, rules = [], [v.data[0].copy()], []
    for _ in range(length):
        v, w, F = step(v, model, mode=mode, tau=tau, rng=rng)
        terminals.append(w.data[0].copy())
        states.append(v.data[0].copy())
        rules.append(int(np.argmax(F.data[0])))
    return GenerationResult(np.array(terminals), np.array(states), rules)


# ---------------------------------------------------------------------------
# checkpoint IO
# ---------------------------------------------------------------------------

def _flat(t: Tensor):
    return [float(x) for x in t.data.ravel()]


def save_checkpoint(model: GrammarModel, path, symbol_table=None):
    doc = {
        "version": CHECKPOINT_VERSION,
        "N": model.N, "R": model.R, "T": model.T, "D": model.D,
        "terminal_squash": model.terminal_squash,
        "Wc": _flat(model.Wc),
        "H1": _flat(model.H1),
        "H2": _flat(model.H2),
        "start_logits": _flat(model.start_logits),
        "psi": _flat(model.psi) if model.psi is not None else None,
        "symbol_table": symbol_table,
    }
    with open(path, "w") as f:
        json.dump(doc, f)
        f.write("\n")


def load_checkpoint(path):
    """Returns (model, symbol_table). Round-trips exactly: JSON floats are
    written with repr precision, so load -> save -> load is value-identical."""
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise CheckpointError(f"{path}: not valid JSON ({e})") from e
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
    try:
        n, r, t, d = doc["N"], doc["R"], doc["T"], doc["D"]
        model = GrammarModel(n, r, t, D=d, terminal_squash=doc.get("terminal_squash", "logistic"))
        model.Wc.data = np.array(doc["Wc"]).reshape(n, r)
        model.H1.data = np.array(doc["H1"]).reshape(r * n, n)
        model.H2.data = np.array(doc["H2"]).reshape(r * n, t)
        model.start_logits.data = np.array(doc["start_logits"]).reshape(1, n)
        if d:
            model.psi.data = np.array(doc["psi"]).reshape(d, n)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: malformed checkpoint ({e})") from e
    return model, doc.get("symbol_table")
