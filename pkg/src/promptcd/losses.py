"""Composite segmentation loss over all predicted probability maps.

Each map contributes a weighted sum of pixel-wise cross-entropy, a soft
IoU loss, and a Dice loss; the total is the mean over maps so the count
of auxiliary heads does not change the loss scale.
"""

from dataclasses import dataclass

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

PROB_EPS = 1e-7


@dataclass
class LossConfig:
    alpha: float = 0.2   # soft IoU weight
    beta: float = 0.1    # Dice weight
    eps: float = 1.0     # smoothing constant in both overlap losses

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError(f"loss weights must be non-negative, got alpha={self.alpha} beta={self.beta}")
        if self.alpha + self.beta >= 1.0:
            raise ConfigError(f"alpha + beta must stay below 1, got {self.alpha + self.beta}")
        if self.eps <= 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")


def bce(prob, target):
    """Mean binary cross-entropy on probabilities (not logits); inputs
    are clamped away from {0, 1} so the logs stay finite."""
    p = T.clamp(prob, PROB_EPS, 1.0 - PROB_EPS)
    loss = target * T.log(p) + (1.0 - target) * T.log(1.0 - p)
    return -loss.mean()

def iou_loss(prob, target, eps=1.0):
    inter = (prob * target).sum()
    union = prob.sum() + target.sum() - inter
    return 1.0 - (inter + eps) / (union + eps)

def dice_loss(prob, target, eps=1.0):
    inter = (prob * target).sum()
    total = prob.sum() + target.sum()
    return 1.0 - (2.0 * inter + eps) / (total + eps)


def total_loss(preds, target, cfg=None):
    """Composite loss over a PredictionSet (or plain list of probability
    maps) against a binary target of matching shape.

    Returns (total, parts) where total is a scalar Tensor and parts maps
    "ce", "iou" and "dice" to their mean float values across maps.
    """
    if cfg is None:
        cfg = LossConfig()
    maps = preds.maps if hasattr(preds, "maps") else list(preds)
    if not maps:
        raise ConfigError("no prediction maps to score")
    if not isinstance(target, Tensor):
        target = Tensor(target)

    ce_w = 1.0 - cfg.alpha - cfg.beta
    terms = []
    parts = {"ce": 0.0, "iou": 0.0, "dice": 0.0}
    for prob in maps:
        ce = bce(prob, target)
        iou = iou_loss(prob, target, cfg.eps)
        dice = dice_loss(prob, target, cfg.eps)
        terms.append(ce_w * ce + cfg.alpha * iou + cfg.beta * dice)
        parts["ce"] += float(ce.data)
        parts["iou"] += float(iou.data)
        parts["dice"] += float(dice.data)

    total = terms[0]
    for t in terms[1:]:
        total = total + t
    total = total * (1.0 / len(maps))
    for k in parts:
        parts[k] /= len(maps)
    return total, parts
