"""Estimator-style facade over the synthesis pipeline.

``fit`` builds the abstraction and synthesises a policy; ``predict`` maps
continuous states (and modes) to control inputs; ``score_samples`` returns
the certified lower bounds of the abstract states the inputs fall in.
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_states
from .abstraction import build_abstraction
from .checker import evaluate
from .geometry import build_partition, label_state
from .model import MjlsSpec, group_steps, load_model, validate
from .pctl import parse_formula, top_level_probs
from .runtime import controller_from_evaluation


class MjlsController(BaseEstimator):
    """Certified controller for a jump system and a reach-avoid style formula.

    Parameters
    ----------
    model : MjlsSpec or path
    partition : dict
        ``bounds``, ``counts`` and optional ``labels`` (proposition -> boxes).
    formula : str
        State formula; its outermost ``P`` operator is the one controlled.
    samples, beta, seed : abstraction parameters.
    jumps : {"product", "robust"}
    group : int
        Steps grouped into one abstract step.
    """

    def __init__(self, model=None, partition=None, formula=None, samples=100, beta=0.01, seed=0,
                 jumps="product", group=1):
        self.model = model
        self.partition = partition
        self.formula = formula
        self.samples = samples
        self.beta = beta
        self.seed = seed
        self.jumps = jumps
        self.group = group

    def fit(self, X=None, y=None):
        """Build and solve the abstraction. ``X`` and ``y`` are ignored."""
        spec = self.model if isinstance(self.model, MjlsSpec) else load_model(self.model)
        self.spec_ = validate(group_steps(spec, self.group))
        P = self.partition
        self.partition_ = build_partition(P["bounds"], P["counts"], P.get("labels"))
        self.formula_ = parse_formula(self.formula)
        self.abstraction_ = build_abstraction(self.spec_, self.partition_, self.samples, self.beta,
                                              self.seed, self.jumps)
        self.evaluation_ = evaluate(self.abstraction_.imdp, self.formula_)
        top = top_level_probs(self.formula_)
        if not top:
            raise ValueError("formula has no probabilistic operator to control")
        self.key_ = str(top[-1])
        self.controller_ = controller_from_evaluation(self.spec_, self.partition_, self.abstraction_,
                                                      self.evaluation_, self.key_)
        self.n_features_in_ = self.spec_.n
        return self

    def _states(self, X, modes):
        X = check_states(X, self.n_features_in_)
        if modes is None:
            modes = np.zeros(X.shape[0], dtype=np.int64)
        modes = np.broadcast_to(np.asarray(modes, dtype=np.int64), (X.shape[0],))
        regions = label_state(self.partition_, X)
        imdp = self.abstraction_.imdp
        return X, modes, np.array([imdp.state_id(g, r) for g, r in zip(regions, modes)])

    def score_samples(self, X, modes=None):
        """Certified lower bound of the controlled formula at each state."""
        check_is_fitted(self, "evaluation_")
        _, _, s = self._states(X, modes)
        return self.evaluation_.bounds[self.key_].lower[s]

    def predict(self, X, modes=None, step=0):
        """First control input at each state; NaN rows where no action applies."""
        check_is_fitted(self, "controller_")
        X, modes, _ = self._states(X, modes)
        U = np.full((X.shape[0], self.spec_.m), np.nan)
        for i, (x, r) in enumerate(zip(X, modes)):
            dec = self.controller_.act(x, int(r), step)
            if dec.u is not None:
                U[i] = dec.u
        return U

    def satisfies(self, X, modes=None):
        """Whether each state satisfies the whole formula."""
        check_is_fitted(self, "evaluation_")
        _, _, s = self._states(X, modes)
        return self.evaluation_.sat[s]

