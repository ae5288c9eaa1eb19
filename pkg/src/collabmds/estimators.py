"""scikit-learn style wrapper around the DQN detector.

``X`` is a sequence of ``BsmRecord`` (or a ``TraceArrays``); labels are
read from the records, so ``y`` is only accepted for API compatibility and
must agree with them when given.  Prediction is one greedy pass, in which
each message's decision depends on earlier messages of its stream.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .agent import AgentConfig, DQNAgent, evaluate, greedy_pass
from .features import DEFAULT_FEATURES, BsmFeaturizer, as_trace_arrays, encode_trace
from .harness.metrics import metrics
from .nn import NetworkSpec


class DQNDetector(ClassifierMixin, BaseEstimator):
    """LSTM deep Q-network that flags misbehaving BSMs.

    Parameters
    ----------
    features : tuple of str
        Kinematic features fed to the network.
    window : int
        Messages per state window.
    hidden : int
        LSTM width.
    dense : tuple of int
        Hidden dense layer widths after the LSTM.
    n_episodes : int
        Training passes over the trace.
    window_key : str
        ``"pseudo"`` for one window per pseudonym, ``"global"`` for one stream.
    agent_options : dict or None
        Extra ``AgentConfig`` fields (learning rate, gamma, rewards, ...).
    random_state : int
        Seed for weights, exploration and replay sampling.
    """

    def __init__(self, features=DEFAULT_FEATURES, window=8, hidden=32, dense=(32,), n_episodes=5,
                 window_key="pseudo", agent_options=None, random_state=0):
        self.features = features
        self.window = window
        self.hidden = hidden
        self.dense = dense
        self.n_episodes = n_episodes
        self.window_key = window_key
        self.agent_options = agent_options
        self.random_state = random_state

    def _encode(self, X):
        return encode_trace(self.featurizer_, as_trace_arrays(X), self.window, self.window_key)

    def fit(self, X, y=None):
        arrays = as_trace_arrays(X)
        if y is not None and not np.array_equal(np.asarray(y), arrays.label):
            raise ValueError("y must match the labels carried by the records")
        self.featurizer_ = BsmFeaturizer(tuple(self.features)).fit(arrays)
        self.spec_ = NetworkSpec(window=self.window, n_features=self.featurizer_.n_features_out_,
                                 hidden=self.hidden, dense=tuple(self.dense))
        agent = DQNAgent(self.spec_, AgentConfig(**(self.agent_options or {})), seed=self.random_state)
        self.history_ = agent.train(self._encode(arrays), self.n_episodes)
        self.params_ = agent.params
        self.classes_ = np.array([0, 1])
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        return greedy_pass(self.params_, self._encode(X)).actions.astype(np.int64)

    def score(self, X, y=None, sample_weight=None) -> float:
        """F-score of the greedy policy on ``X``."""
        check_is_fitted(self, "params_")
        return metrics(evaluate(self.params_, self._encode(X))).f_score
