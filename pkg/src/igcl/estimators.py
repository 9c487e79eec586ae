"""scikit-learn compatible classifiers.

Both classifiers take flattened spectrogram features.  Unlabeled rows are
marked with ``y == -1``, as in :mod:`sklearn.semi_supervised`; they still
count for feature standardization, and the information-graph classifier
uses them as graph nodes.
"""

from __future__ import annotations

import numpy as np
from scipy.special import softmax
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, column_or_1d

from .exceptions import ConfigurationError
from .infograph import add_annotation_anchors, build_info_graph
from .loss import STRATEGIES
from .model import Network, init_anchor_vectors
from .siggen import Segment, StreamId
from .train import TrainPlan, train_semi_supervised, train_supervised_xe

UNLABELED = -1
_NO_SAMPLES = np.empty(0)


class _NetworkClassifier(ClassifierMixin, BaseEstimator):
    def _check_Xy(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = column_or_1d(y).astype(int)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} rows but y has {len(y)} labels")
        labeled = y != UNLABELED
        if not labeled.any():
            raise ConfigurationError("no labeled rows (all y == -1)")
        self.classes_ = np.unique(y[labeled])
        self.n_features_in_ = X.shape[1]
        if self.standardize:
            self.mean_ = X.mean(axis=0)
            self.scale_ = np.maximum(X.std(axis=0), 1e-8)
        else:
            self.mean_ = np.zeros(X.shape[1])
            self.scale_ = np.ones(X.shape[1])
        return X, y, labeled

    def _encode_labels(self, y):
        y = np.asarray(y)
        idx = np.searchsorted(self.classes_, y)
        if np.any(idx >= len(self.classes_)) or np.any(self.classes_[np.minimum(idx, len(self.classes_) - 1)] != y):
            raise ValueError("labels outside the classes seen during fit")
        return idx

    def _scale(self, X):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return (X - self.mean_) / self.scale_

    def _validation(self, validation):
        if validation is None:
            return None
        Xv, yv = validation
        return self._scale(Xv), self._encode_labels(column_or_1d(yv).astype(int))

    def _network(self, n_classes):
        return Network(self.n_features_in_, self.hidden, self.head_hidden, self.embed_dim, n_classes, self.random_state)

    def decision_function(self, X):
        check_is_fitted(self, "network_")
        return self.network_.classify(self._scale(X), training=False)

    def predict_proba(self, X):
        return softmax(self.decision_function(X), axis=1)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def transform(self, X):
        """Encoder representations of X."""
        check_is_fitted(self, "network_")
        return self.network_.encode(self._scale(X))


class CrossEntropyClassifier(_NetworkClassifier):
    """Encoder and classification head trained jointly with cross-entropy."""

    def __init__(self, hidden=(512, 512), head_hidden=512, embed_dim=128, epochs=60, batch_size=128, lr=0.05,
                 lr_min=0.0, momentum=0.9, weight_decay=1e-4, max_grad_norm=None, selection="validation", standardize=True, random_state=0):
        self.hidden = hidden
        self.head_hidden = head_hidden
        self.embed_dim = embed_dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_min = lr_min
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.max_grad_norm = max_grad_norm
        self.selection = selection
        self.standardize = standardize
        self.random_state = random_state

    def fit(self, X, y, validation=None):
        X, y, labeled = self._check_Xy(X, y)
        Xs = self._scale(X)
        plan = TrainPlan(mode="xe", use_system_context=False, epochs=self.epochs, n_edges=self.batch_size // 2,
                         batch_size=self.batch_size, lr=self.lr, lr_min=self.lr_min, momentum=self.momentum,
                         weight_decay=self.weight_decay, max_grad_norm=self.max_grad_norm,
                         selection=self.selection, seed=self.random_state)
        self.network_ = self._network(len(self.classes_))
        self.history_, self.selected_epoch_ = train_supervised_xe(
            plan, Xs[labeled], self._encode_labels(y[labeled]), self.network_, self._validation(validation))
        return self


class InfoGraphClassifier(_NetworkClassifier):
    """Contrastive training on an information graph, then a classification
    head fitted on the frozen encoder.

    ``fit`` needs, per row of X, the recording stream (station, channel) and
    the time interval (t_start, t_end); they define the context edges.  With
    ``use_system_context=False`` only annotation edges are used.
    """

    def __init__(self, strategy="anchor", use_system_context=True, hidden=(512, 512), head_hidden=512, embed_dim=128,
                 tau=0.1, n_edges=64, unlabeled_ratio=4.5, epochs=60, finetune_epochs=20, batch_size=128, lr=0.05,
                 lr_min=0.0, momentum=0.9, weight_decay=1e-4, max_grad_norm=None, selection="validation", standardize=True, random_state=0):
        self.strategy = strategy
        self.use_system_context = use_system_context
        self.hidden = hidden
        self.head_hidden = head_hidden
        self.embed_dim = embed_dim
        self.tau = tau
        self.n_edges = n_edges
        self.unlabeled_ratio = unlabeled_ratio
        self.epochs = epochs
        self.finetune_epochs = finetune_epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_min = lr_min
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.max_grad_norm = max_grad_norm
        self.selection = selection
        self.standardize = standardize
        self.random_state = random_state

    def fit(self, X, y, *, stream, interval, finetune=None, validation=None):
        """Fit on rows X (labels y, -1 = unlabeled).

        ``finetune=(X_ft, y_ft)`` supplies a separate labeled set for the
        classification head; by default the labeled rows of X are used.
        """
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"strategy must be one of {STRATEGIES}")
        X, y, labeled = self._check_Xy(X, y)
        stream = np.asarray(stream, dtype=int).reshape(len(X), 2)
        interval = np.asarray(interval, dtype=float).reshape(len(X), 2)
        if np.any(interval[:, 1] <= interval[:, 0]):
            raise ValueError("every interval needs t_end > t_start")
        Xs = self._scale(X)
        y_enc = np.full(len(y), UNLABELED)
        y_enc[labeled] = self._encode_labels(y[labeled])
        n_classes = len(self.classes_)

        segments = [Segment(i, StreamId(int(stream[i, 0]), int(stream[i, 1])), float(interval[i, 0]),
                            float(interval[i, 1]), _NO_SAMPLES) for i in range(len(X))]
        graph = build_info_graph(segments, self.use_system_context)
        self.graph_ = add_annotation_anchors(graph, [(i, int(y_enc[i])) for i in np.flatnonzero(labeled)], n_classes)

        if finetune is None:
            X_ft, y_ft = Xs[labeled], y_enc[labeled]
        else:
            X_ft = self._scale(finetune[0])
            y_ft = self._encode_labels(column_or_1d(finetune[1]).astype(int))

        plan = TrainPlan(mode=f"ig_{self.strategy}", use_system_context=self.use_system_context, epochs=self.epochs,
                         n_edges=self.n_edges, batch_size=self.batch_size, tau=self.tau,
                         unlabeled_ratio=self.unlabeled_ratio, finetune_epochs=self.finetune_epochs, lr=self.lr,
                         lr_min=self.lr_min, momentum=self.momentum, weight_decay=self.weight_decay,
                         max_grad_norm=self.max_grad_norm, selection=self.selection, seed=self.random_state)
        self.network_ = self._network(n_classes)
        self.anchors_ = init_anchor_vectors(n_classes, self.embed_dim, self.random_state)
        self.train_stats_ = {}
        self.history_, self.selected_epoch_ = train_semi_supervised(
            plan, self.graph_, Xs, X_ft, y_ft, self.network_, self.anchors_, self._validation(validation),
            stats=self.train_stats_)
        return self

    def embed(self, X):
        """Unit-norm embeddings of X."""
        check_is_fitted(self, "network_")
        return self.network_.embed(self._scale(X), training=False)
