"""Forecasting and trading metrics, plus the all-in/all-out backtest."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.stats import rankdata

from .errors import BankruptLedgerError, ShapeError

BUY, SELL = 1, 0


def mae(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction shape {pred.shape} differs from truth {truth.shape}")
    if pred.size == 0:
        raise ValueError("mae of empty vectors")
    return float(np.mean(np.abs(pred - truth)))


def auc_score(scores, truth) -> float | None:
    """Mann-Whitney AUC with half credit for ties; ``None`` when a class is absent."""
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth).astype(bool)
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    u = ranks[truth].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_points(scores, truth) -> list[tuple[float, float, float]]:
    """(false positive rate, true positive rate, threshold) from strictest to loosest."""
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth).astype(bool)
    n_pos, n_neg = max(int(truth.sum()), 1), max(int((~truth).sum()), 1)
    pts = [(0.0, 0.0, float("inf"))]
    for thr in np.unique(scores)[::-1]:
        pred = scores >= thr
        pts.append((float(np.sum(pred & ~truth) / n_neg), float(np.sum(pred & truth) / n_pos), float(thr)))
    return pts


def classification_metrics(pred_labels, pred_scores, truth) -> dict[str, float | None]:
    """Precision, recall and F1 of the buy class plus AUC (``None`` for single-class truth)."""
    pred = np.asarray(pred_labels).astype(bool)
    truth_b = np.asarray(truth).astype(bool)
    if truth_b.size == 0:
        raise ValueError("classification metrics of empty input")
    if pred.shape != truth_b.shape:
        raise ShapeError("predicted labels and truth differ in length")
    tp = int(np.sum(pred & truth_b))
    fp = int(np.sum(pred & ~truth_b))
    fn = int(np.sum(~pred & truth_b))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "auc": auc_score(pred_scores, truth_b) if pred_scores is not None else None,
    }


class Transaction(NamedTuple):
    day: int
    action: str
    price: float
    units: float
    charge: float


@dataclass
class TradeLedger:
    transactions: list[Transaction] = field(default_factory=list)
    capital: list[float] = field(default_factory=list)

    @property
    def final(self) -> float:
        return self.capital[-1]


class BacktestResult(NamedTuple):
    ar_percent: float
    final_capital: float
    ledger: TradeLedger


def backtest_ar(
    signals,
    closes,
    capital0: float = 100_000.0,
    charge: float = 10.0,
    trading_days_per_year: int = 252,
) -> BacktestResult:
    """Long-only, all-in/all-out replay of daily buy/sell signals at the close.

    A buy while flat spends all cash (less the charge) on fractional units; a
    sell while long liquidates (less the charge).  Open positions are marked
    to market on the last day.  AR is ``((final/capital0)**(tdy/n) - 1) * 100``.
    """
    signals = np.asarray(signals)
    closes = np.asarray(closes, dtype=np.float64)
    if signals.shape != closes.shape or closes.ndim != 1 or closes.size == 0:
        raise ShapeError("signals and closes must be equal-length nonempty vectors")
    if capital0 <= 0:
        raise ValueError("capital0 must be positive")
    ledger = TradeLedger()
    cash, units = float(capital0), 0.0
    for day, (sig, price) in enumerate(zip(signals, closes)):
        if sig == BUY and units == 0.0:
            spend = cash - charge
            if spend <= 0:
                raise BankruptLedgerError(f"day {day}: cash {cash:.2f} cannot cover charge {charge}")
            units = spend / price
            cash = 0.0
            ledger.transactions.append(Transaction(day, "buy", float(price), units, charge))
        elif sig == SELL and units > 0.0:
            proceeds = units * price - charge
            if proceeds < 0:
                raise BankruptLedgerError(f"day {day}: position worth {units * price:.2f} cannot cover charge {charge}")
            ledger.transactions.append(Transaction(day, "sell", float(price), units, charge))
            cash, units = proceeds, 0.0
        ledger.capital.append(cash + units * price)
    final = ledger.final
    ar = ((final / capital0) ** (trading_days_per_year / closes.size) - 1.0) * 100.0
    return BacktestResult(float(ar), float(final), ledger)


def truth_signals(closes) -> np.ndarray:
    """Hindsight signals: buy when tomorrow closes higher; sell on the last day."""
    closes = np.asarray(closes, dtype=np.float64)
    sig = np.zeros(closes.size, dtype=np.int64)
    sig[:-1] = closes[1:] > closes[:-1]
    return sig
