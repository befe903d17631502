"""Use a trained model for detection refinement and future-event forecasting.

Decoding follows hard states: at each step the rules of the current argmax
non-terminal are scored by the inner product of their terminal vector with the
observation, the winner's terminal is multiplied elementwise into the
observation (no renormalization), and the state advances through the winner's
H1 argmax. beam=1 is the greedy pass; larger beams keep the top hypotheses by
cumulative match score and report the best final branch retrospectively.
Ties always break to the lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import grammar as gm
from .extraction import rule_probabilities


class UndefinedMetricError(ValueError):
    """The requested metric has no defined value on this input."""


@dataclass
class DecodeResult:
    fused: np.ndarray          # S x T, elementwise grammar * observation
    rule_trace: list           # global rule row (lhs * R + slot) per step
    grammar_probs: np.ndarray  # S x T grammar-only terminal vectors
    states: list               # hard non-terminal per step (state that emitted)


@dataclass
class ForecastResult:
    terminals: np.ndarray      # H x T predicted terminal vectors
    rule_trace: list
    states: list


@dataclass
class ForecastAccuracy:
    mean_accuracy: float
    per_step: list             # accuracy at forecast offset 1..H
    n_records: int
    n_skipped: int


def _terminal_rows(model: gm.GrammarModel):
    if model.terminal_squash == "logistic":
        return dc.sigmoid_values(model.H2.data)
    return dc.softmax_rows(model.H2.data)


def constrained_decode(model: gm.GrammarModel, observations, tau=1.0, beam=1,
                       context=None) -> DecodeResult:
    """Match the observation stream against the grammar and fuse the two."""
    obs = np.asarray(observations, dtype=np.float64)
    if obs.ndim != 2 or obs.shape[0] < 1:
        raise ValueError("constrained_decode: observations must be a non-empty SxT array")
    if obs.shape[1] != model.T:
        raise dc.DimensionError(f"observations have {obs.shape[1]} classes, model T={model.T}")
    if beam < 1:
        raise dc.ParameterError(f"beam must be >= 1, got {beam}")
    term_rows = _terminal_rows(model)
    next_state = np.argmax(model.H1.data, axis=1)
    start = int(np.argmax(gm.initial_nonterminal(model, context).data[0]))

    # hypothesis: (cumulative score, state, rule rows so far, states so far)
    hyps = [(0.0, start, (), ())]
    for t in range(obs.shape[0]):
        candidates = []
        for score, state, rows, states in hyps:
            base = state * model.R
            for r in range(model.R):
                row = base + r
                candidates.append((score + float(term_rows[row] @ obs[t]),
                                   int(next_state[row]), rows + (row,), states + (state,)))
        candidates.sort(key=lambda c: -c[0])  # stable: ties keep (hyp, rule) order
        hyps = candidates[:beam]

    _, _, rows, states = hyps[0]
    grammar_probs = term_rows[list(rows)]
    return DecodeResult(fused=grammar_probs * obs, rule_trace=list(rows),
                        grammar_probs=grammar_probs, states=list(states))


def forecast(model: gm.GrammarModel, prefix, horizon, tau=1.0, beam=1,
             context=None) -> ForecastResult:
    """Decode the observed prefix to a state, then follow the most probable
    rule (argmax of the learned rule probabilities) for `horizon` steps."""
    if horizon < 1:
        raise dc.ParameterError(f"horizon must be >= 1, got {horizon}")
    prefix = np.asarray(prefix, dtype=np.float64).reshape(-1, model.T) \
        if np.size(prefix) else np.zeros((0, model.T))
    if len(prefix):
        decoded = constrained_decode(model, prefix, tau=tau, beam=beam, context=context)
        state = int(np.argmax(model.H1.data[decoded.rule_trace[-1]]))
    else:
        state = int(np.argmax(gm.initial_nonterminal(model, context).data[0]))
    probs = rule_probabilities(model, tau)
    term_rows = _terminal_rows(model)
    next_state = np.argmax(model.H1.data, axis=1)

    terminals, rows, states = [], [], []
    for _ in range(horizon):
        row = state * model.R + int(np.argmax(probs[state]))
        terminals.append(term_rows[row])
        rows.append(row)
        states.append(state)
        state = int(next_state[row])
    return ForecastResult(terminals=np.array(terminals), rule_trace=rows, states=states)


def per_frame_map(predictions, targets):
    """Per-class average precision over all frames and their mean.

    AP interpolates by tie group: frames sharing a score enter together, and
    AP = sum over distinct-score thresholds of (recall step * precision). This
    makes the metric invariant under strictly monotone score transforms and
    gives AP = class prior for constant scores. Classes without positives are
    excluded from the mean; returns (per-class AP with NaN there, mAP).
    """
    pred = np.asarray(predictions, dtype=np.float64)
    targ = np.asarray(targets, dtype=np.float64)
    if pred.shape != targ.shape:
        raise dc.DimensionError(f"per_frame_map: shapes differ, {pred.shape} vs {targ.shape}")
    n_classes = pred.shape[1]
    aps = np.full(n_classes, np.nan)
    for c in range(n_classes):
        pos = targ[:, c] >= 0.5
        n_pos = int(pos.sum())
        if n_pos == 0:
            continue
        order = np.argsort(-pred[:, c], kind="stable")
        scores = pred[order, c]
        hits = pos[order].astype(np.float64)
        # last index of every tie group
        boundary = np.nonzero(np.diff(scores))[0]
        ends = np.concatenate([boundary, [len(scores) - 1]])
        tp = np.cumsum(hits)[ends]
        totals = ends + 1.0
        recall = tp / n_pos
        precision = tp / totals
        recall_steps = np.diff(np.concatenate([[0.0], recall]))
        aps[c] = float(np.sum(recall_steps * precision))
    if np.all(np.isnan(aps)):
        raise UndefinedMetricError("no class has a positive frame; mAP is undefined")
    return aps, float(np.nanmean(aps))


def split_lengths(length, obs_frac, pred_frac):
    """(observed steps, forecast steps) for a record, or None when the record
    is too short to hold both parts."""
    if not (0 < obs_frac < 1 and 0 < pred_frac < 1):
        raise dc.ParameterError("fractions must lie in (0, 1)")
    k = max(1, int(obs_frac * length))
    h = max(1, int(pred_frac * length))
    if k + h > length:
        return None
    return k, h


def forecast_accuracy(model: gm.GrammarModel, records, obs_frac, pred_frac,
                      tau=1.0, beam=1) -> ForecastAccuracy:
    """Observe a prefix fraction of each record, forecast the stated fraction,
    and score per-step argmax accuracy against the clean labels. Records that
    are too short (or lack labels) are skipped and counted."""
    step_hits = {}
    n_scored = n_skipped = 0
    for rec in records:
        split = split_lengths(len(rec.targets), obs_frac, pred_frac)
        if split is None or rec.labels is None:
            n_skipped += 1
            continue
        k, h = split
        result = forecast(model, rec.targets[:k], h, tau=tau, beam=beam, context=rec.context)
        pred_labels = np.argmax(result.terminals, axis=1)
        truth = np.asarray(rec.labels[k:k + h])
        for j in range(h):
            step_hits.setdefault(j, []).append(float(pred_labels[j] == truth[j]))
        n_scored += 1
    if not step_hits:
        raise UndefinedMetricError("no record was long enough to score")
    per_step = [float(np.mean(step_hits[j])) for j in sorted(step_hits)]
    all_hits = [hit for hits in step_hits.values() for hit in hits]
    return ForecastAccuracy(mean_accuracy=float(np.mean(all_hits)), per_step=per_step,
                            n_records=n_scored, n_skipped=n_skipped)


@dataclass
class DetectionReport:
    map_fused: float
    map_raw: float
    accuracy_fused: float
    accuracy_raw: float
    per_class_ap: np.ndarray


def evaluate_detection(model: gm.GrammarModel, records, tau=1.0, beam=1) -> DetectionReport:
    """Decode every record's observations, fuse with the grammar, and compare
    fused vs raw per-frame mAP and argmax accuracy against the clean labels."""
    fused_rows, raw_rows, truth_rows = [], [], []
    for rec in records:
        if rec.labels is None:
            raise ValueError(f"record {rec.id} has no clean labels to evaluate against")
        decoded = constrained_decode(model, rec.targets, tau=tau, beam=beam,
                                     context=rec.context)
        fused_rows.append(decoded.fused)
        raw_rows.append(rec.targets)
        onehot = np.zeros_like(rec.targets)
        onehot[np.arange(len(rec.labels)), rec.labels] = 1.0
        truth_rows.append(onehot)
    fused = np.concatenate(fused_rows)
    raw = np.concatenate(raw_rows)
    truth = np.concatenate(truth_rows)
    per_class_ap, map_fused = per_frame_map(fused, truth)
    _, map_raw = per_frame_map(raw, truth)
    labels = np.argmax(truth, axis=1)
    return DetectionReport(
        map_fused=map_fused,
        map_raw=map_raw,
        accuracy_fused=float(np.mean(np.argmax(fused, axis=1) == labels)),
        accuracy_raw=float(np.mean(np.argmax(raw, axis=1) == labels)),
        per_class_ap=per_class_ap,
    )
