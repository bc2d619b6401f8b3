"""Entropy-threshold attack detector, ROC analysis, and the batch pipeline."""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .attacks import run_attack
from .csvio import write_csv
from .errors import ConfigError, ShapeError
from .explain import feature_response

log = logging.getLogger(__name__)

FIXED_FPRS = (0.01, 0.05, 0.10)


def detect(score, tau):
    """Flag as adversarial when the average entropy exceeds ``tau``."""
    return np.asarray(score) > tau if np.ndim(score) else bool(score > tau)


@dataclass
class RocCurve:
    thresholds: np.ndarray  # decreasing; the last one is -inf
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float
    rate_at_fpr: dict

    def to_csv(self, path):
        write_csv(path, ("threshold", "fpr", "tpr"), zip(self.thresholds, self.fpr, self.tpr))


def rate_at(fpr, tpr, target):
    """Detection rate at ``target`` FPR by linear interpolation along the curve."""
    i = int(np.searchsorted(fpr, target, side="right")) - 1
    if i < 0:
        return 0.0
    if fpr[i] == target or i + 1 >= len(fpr):
        return float(tpr[i])
    f0, f1, t0, t1 = fpr[i], fpr[i + 1], tpr[i], tpr[i + 1]
    return float(t0 + (t1 - t0) * (target - f0) / (f1 - f0))


def roc_auc(clean_scores, adv_scores):
    """Sweep ``score > t`` over every distinct score, strictest first, then ``-inf``."""
    clean = np.sort(np.asarray(clean_scores, dtype=np.float64))
    adv = np.sort(np.asarray(adv_scores, dtype=np.float64))
    if clean.size == 0 or adv.size == 0:
        raise ShapeError("roc_auc needs non-empty clean and adversarial scores")
    thr = np.unique(np.concatenate([clean, adv]))[::-1]
    thr = np.append(thr, -np.inf)
    fp = clean.size - np.searchsorted(clean, thr, side="right")
    tp = adv.size - np.searchsorted(adv, thr, side="right")
    fpr, tpr = fp / clean.size, tp / adv.size
    # trapezoids on integer counts, one rounding at the end
    area = sum(int(d) * int(a + b) for d, a, b in zip(np.diff(fp), tp[1:], tp[:-1]))
    auc = area / (2 * clean.size * adv.size)
    rates = {f: rate_at(fpr, tpr, f) for f in FIXED_FPRS}
    return RocCurve(thr, fpr, tpr, auc, rates)


@dataclass
class TauPolicy:
    """Either a fixed threshold or a percentile of clean calibration scores."""
    value: float = None
    percentile: float = 99.0

    def resolve(self, clean_scores):
        if self.value is not None:
            return float(self.value)
        s = np.asarray(clean_scores, dtype=np.float64)
        if s.size == 0:
            return float("inf")
        return float(np.percentile(s, self.percentile))


@dataclass
class AttackConfig:
    attack: str = "fgsm"
    strength: float = 0.25
    max_iter: int = 50


@dataclass
class SampleRecord:
    sample_id: int
    label: int
    clean_score: float = float("nan")
    adv_score: float = float("nan")
    attack_success: bool = False
    failed: bool = False
    error: str = ""
    clean_flag: bool = False
    adv_flag: bool = False


@dataclass
class DetectionReport:
    samples: list = field(default_factory=list)
    tau: float = float("nan")
    roc: RocCurve = None
    confusion: dict = field(default_factory=dict)  # tp, fp, tn, fn over 2 decisions per sample

    def ok(self):
        return [s for s in self.samples if not s.failed]

    def clean_scores(self):
        return np.array([s.clean_score for s in self.ok()])

    def adv_scores(self):
        return np.array([s.adv_score for s in self.ok()])

    def welch(self):
        """One-sided Welch test that adversarial scores are larger: ``(t, p)``."""
        from scipy.stats import ttest_ind
        res = ttest_ind(self.adv_scores(), self.clean_scores(), equal_var=False,
                        alternative="greater")
        return float(res.statistic), float(res.pvalue)

    def summary(self):
        ok = self.ok()
        out = {"n": len(self.samples), "failed": len(self.samples) - len(ok), "tau": self.tau}
        out.update(self.confusion)
        if ok:
            out["mean_clean"] = float(self.clean_scores().mean())
            out["mean_adv"] = float(self.adv_scores().mean())
            out["attack_success_rate"] = float(np.mean([s.attack_success for s in ok]))
        if self.roc is not None:
            out["auc"] = self.roc.auc
            for f, r in self.roc.rate_at_fpr.items():
                out[f"tpr_at_fpr_{f:g}"] = r
        return out

    def write_scores_csv(self, path):
        rows = ([s.sample_id, s.clean_score, s.adv_score, s.adv_flag] for s in self.samples)
        write_csv(path, ("sample_id", "clean_S", "adv_S", "flag"), rows)


def _score_sample(model, image, label, attack, patch, method):
    res = run_attack(model, image, label, attack.attack, attack.strength, attack.max_iter)
    clean, adv = feature_response(model, np.stack([image, res.adversarial]), patch, method)
    return clean.mean_entropy, adv.mean_entropy, res


def detection_pipeline(model, images, labels, attack=None, tau_policy=None, threads=1,
                       patch=3, method="histogram", sample_ids=None, keep=False):
    """Attack every image, score clean and adversarial maps, flag, and summarize.

    A sample whose attack or map fails is marked ``failed`` and left out of the
    ROC. With ``keep=True`` the attack results are returned alongside the
    report so callers can export images.
    """
    attack = attack or AttackConfig()
    tau_policy = tau_policy or TauPolicy()
    n = len(images)
    ids = list(range(n)) if sample_ids is None else list(sample_ids)
    if method not in ("histogram", "intensity"):
        raise ConfigError(f"unknown entropy method {method!r}")

    def one(i):
        rec = SampleRecord(int(ids[i]), int(labels[i]))
        try:
            c, a, res = _score_sample(model, images[i], int(labels[i]), attack, patch, method)
        except Exception as exc:  # one bad sample must not abort the batch
            log.warning("sample %s failed: %s", ids[i], exc)
            rec.failed, rec.error = True, f"{type(exc).__name__}: {exc}"
            return rec, None
        rec.clean_score, rec.adv_score, rec.attack_success = c, a, res.success
        return rec, res

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            done = list(pool.map(one, range(n)))
    else:
        done = [one(i) for i in range(n)]
    report = DetectionReport([r for r, _ in done])
    ok = report.ok()
    report.tau = tau_policy.resolve([s.clean_score for s in ok])
    tp = fp = tn = fn = 0
    for s in ok:
        s.clean_flag = detect(s.clean_score, report.tau)
        s.adv_flag = detect(s.adv_score, report.tau)
        fp += s.clean_flag
        tn += not s.clean_flag
        tp += s.adv_flag
        fn += not s.adv_flag
    report.confusion = {"tp": tp, "fp": fp, "tn": tn, "fn": fn}
    if ok:
        report.roc = roc_auc(report.clean_scores(), report.adv_scores())
    if keep:
        return report, [res for _, res in done]
    return report
