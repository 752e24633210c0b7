"""Scikit-learn style estimators wrapping the quantization pipeline.

``SerqQuantizer`` treats a linear layer as a regressor: ``fit`` takes
calibration activations plus the layer's weight matrix, ``predict`` runs the
quantized decomposed forward, and ``score`` reports the QSNR in dB against
the exact product (higher is better). The fake-quant transformers compose
with ordinary sklearn pipelines.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import ValidationError, as_matrix
from .compensate import OpProbe
from .harness import qsnr
from .mxfmt import mx_decode, mx_encode
from .pipeline import layer_forward, quantize_layer
from .quantcore import IntQuantConfig, fake_quant


class SerqQuantizer(BaseEstimator):
    """Quantize one linear layer with saliency-aware error reconstruction.

    Parameters mirror the pipeline: integer or MXFP4 formats, RTN or
    Hessian-guided weight rounding, optional activation flattening, and the
    compensator rank. Fitted state lives in trailing-underscore attributes.
    """

    def __init__(
        self,
        rank: int = 128,
        weight_bits: int = 4,
        act_bits: int = 8,
        weight_group: int | str = "per-row",
        alpha: float = 0.5,
        saf: bool = True,
        method: str = "rtn",
        fmt: str = "int",
        block_size: int = 32,
        r_bits: int = 4,
    ):
        self.rank = rank
        self.weight_bits = weight_bits
        self.act_bits = act_bits
        self.weight_group = weight_group
        self.alpha = alpha
        self.saf = saf
        self.method = method
        self.fmt = fmt
        self.block_size = block_size
        self.r_bits = r_bits

    def fit(self, X, weight):
        """Calibrate on activations ``X`` and quantize ``weight``.

        ``X`` is (n_samples, in_dim); ``weight`` is (in_dim, out_dim).
        """
        X = as_matrix(X, "X")
        weight = as_matrix(weight, "weight")
        art = quantize_layer(
            weight,
            X,
            rank=self.rank,
            weight_bits=self.weight_bits,
            act_bits=self.act_bits,
            weight_group=self.weight_group,
            alpha=self.alpha,
            saf=self.saf,
            method=self.method,
            fmt=self.fmt,
            block_size=self.block_size,
            r_bits=self.r_bits,
        )
        self.artifacts_ = art
        self.weight_ = weight
        self.main_ = art.main
        self.compensator_ = art.comp
        self.saliency_plan_ = art.plan
        self.flattening_plan_ = art.smoothing
        self.n_features_in_ = weight.shape[0]
        return self

    def _check_fitted(self):
        if not hasattr(self, "artifacts_"):
            raise ValidationError("estimator is not fitted")

    def predict(self, X, probe: OpProbe | None = None) -> np.ndarray:
        """Quantized layer output for a batch of activations."""
        self._check_fitted()
        X = as_matrix(X, "X")
        if X.shape[1] != self.n_features_in_:
            raise ValidationError(
                f"X has {X.shape[1]} features, expected {self.n_features_in_}"
            )
        return layer_forward(self.artifacts_, X, probe)

    def score(self, X, y=None) -> float:
        """QSNR in dB of the quantized output against the exact product."""
        self._check_fitted()
        X = as_matrix(X, "X")
        y_ref = X @ self.weight_ if y is None else as_matrix(y, "y")
        return qsnr(y_ref, self.predict(X))


class IntFakeQuant(TransformerMixin, BaseEstimator):
    """Stateless quantize-dequantize transformer (integer grid)."""

    def __init__(
        self,
        bits: int = 8,
        symmetric: bool = False,
        group_size: int | str = "per-row",
        axis: str = "row",
    ):
        self.bits = bits
        self.symmetric = symmetric
        self.group_size = group_size
        self.axis = axis

    def _config(self) -> IntQuantConfig:
        return IntQuantConfig(
            bits=self.bits,
            symmetric=self.symmetric,
            group_size=self.group_size,
            axis=self.axis,
        )

    def fit(self, X, y=None):
        self._config()
        self.n_features_in_ = as_matrix(X, "X").shape[1]
        return self

    def transform(self, X) -> np.ndarray:
        return fake_quant(as_matrix(X, "X"), self._config())


class MxFakeQuant(TransformerMixin, BaseEstimator):
    """Stateless MXFP4 encode-decode transformer."""

    def __init__(self, block_size: int = 32):
        self.block_size = block_size

    def fit(self, X, y=None):
        self.n_features_in_ = as_matrix(X, "X").shape[1]
        return self

    def transform(self, X) -> np.ndarray:
        return mx_decode(mx_encode(as_matrix(X, "X"), self.block_size))
