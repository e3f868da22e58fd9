"""Named prior configurations and a rule-based hyperparameter recommender.

Preset names
------------
``R2-<aG>``
    ``a1 = G * a_G``, ``a2 = 0.5``, ``c_g = 0.5`` (for example ``R2-0.5``).
``R2-u``
    Uniform R² and uniform simplices: ``a1 = a2 = a_G = c_g = 1``.
``R2-c`` / ``R2-d``
    R² mean 1/3 and precision 3; ``(a_G, c_g) = (1, 0.5)`` for concentrated
    and ``(0.5, 1)`` for distributed signals.
``nongrouped-R2D2-<a_pi>``
    A single Dirichlet with concentration ``a_pi`` over all ``p``
    coefficients. The R² prior matches the grouped ``R2-<a_pi>`` model on the
    same data (``a1 = G * a_pi``, ``a2 = 0.5``), so the pair differs only in
    the allocation hierarchy.
"""

import re
from dataclasses import dataclass

from .errors import DomainError
from .prior_core import (
    GroupStructure,
    Hyperparams,
    beta_shapes_from_mean_precision,
    couple_ag_from_cg,
    couple_cg_from_ag,
)

DEFAULT_A2 = 0.5
CONCENTRATED_AG = 0.1
DISTRIBUTED_AG = 1.0

_NUM = r"([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)"


@dataclass(frozen=True)
class PriorPreset:
    """A resolved preset: name, hyperparameters and the structure to fit with.

    For nongrouped presets ``structure`` is the single-group collapse of the
    input structure.
    """

    name: str
    hyper: Hyperparams
    structure: GroupStructure

    @property
    def grouped(self):
        return not self.name.startswith("nongrouped")


def preset_names():
    return ("R2-<aG>", "R2-u", "R2-c", "R2-d", "nongrouped-R2D2-<a_pi>")


def resolve_preset(name, structure):
    """Resolve a preset name against a group structure.

    Raises
    ------
    DomainError
        For names outside the documented set.
    """
    G = structure.G
    if name == "R2-u":
        return PriorPreset(name, Hyperparams(1.0, 1.0, 1.0, (1.0,) * G), structure)
    if name in ("R2-c", "R2-d"):
        a1, a2 = beta_shapes_from_mean_precision(1.0 / 3.0, 3.0)
        a_G, c = (1.0, 0.5) if name == "R2-c" else (0.5, 1.0)
        return PriorPreset(name, Hyperparams(a1, a2, a_G, (c,) * G), structure)
    m = re.fullmatch(r"R2-" + _NUM, name)
    if m:
        a_G = float(m.group(1))
        if a_G <= 0:
            raise DomainError("a_G must be > 0")
        return PriorPreset(name, Hyperparams(G * a_G, DEFAULT_A2, a_G, (0.5,) * G), structure)
    m = re.fullmatch(r"nongrouped-R2D2-" + _NUM, name)
    if m:
        a_pi = float(m.group(1))
        if a_pi <= 0:
            raise DomainError("a_pi must be > 0")
        flat = GroupStructure((structure.p,))
        return PriorPreset(name, Hyperparams(G * a_pi, DEFAULT_A2, 1.0, (a_pi,)), flat)
    raise DomainError(f"unknown preset {name!r}; known forms: {', '.join(preset_names())}")


def nongrouped_counterpart(name):
    """Name of the nongrouped model paired with a grouped preset in comparisons."""
    if name == "R2-u":
        return "nongrouped-R2D2-1"
    m = re.fullmatch(r"R2-" + _NUM, name)
    if m:
        return f"nongrouped-R2D2-{m.group(1)}"
    raise DomainError(f"no nongrouped counterpart defined for {name!r}")


@dataclass(frozen=True)
class Knowledge:
    """What the analyst is willing to say before seeing data.

    Attributes
    ----------
    r2_mean, r2_precision : float, optional
        Prior guess of R² and how firmly it is held (Beta mean/precision).
    signal : str or sequence of str, optional
        ``"concentrated"`` or ``"distributed"``; a single tag applies to all
        groups.
    couple : str, optional
        ``"cg_from_ag"`` sets ``c_g = a_G / p_g``; ``"ag_from_cg"`` sets
        ``a_G`` from the group sizes and ``c_g``.
    c_g : float or sequence of float, optional
        Within-group concentrations; needed for ``couple="ag_from_cg"``.
    """

    r2_mean: float = None
    r2_precision: float = None
    signal: object = None
    couple: str = None
    c_g: object = None

    def is_empty(self):
        return all(v is None for v in (self.r2_mean, self.r2_precision, self.signal,
                                       self.couple, self.c_g))


def _signal_tags(signal, G):
    tags = [signal] * G if isinstance(signal, str) else list(signal)
    if len(tags) != G:
        raise DomainError(f"{len(tags)} signal tags for {G} groups")
    for t in tags:
        if t not in ("concentrated", "distributed"):
            raise DomainError(f"unknown signal tag {t!r}")
    return tags


def recommend(knowledge, structure):
    """Map prior knowledge to hyperparameters.

    Returns
    -------
    (Hyperparams, str)
        The hyperparameters and a rationale naming each rule applied.
    """
    G = structure.G
    if knowledge.is_empty():
        return (Hyperparams(1.0, 1.0, 1.0, (1.0,) * G),
                "no prior knowledge: uniform R2 and uniform simplices (R2-u)")
    notes = []
    if (knowledge.r2_mean is None) != (knowledge.r2_precision is None):
        raise DomainError("give both r2_mean and r2_precision, or neither")
    if knowledge.r2_mean is not None:
        a1, a2 = beta_shapes_from_mean_precision(knowledge.r2_mean, knowledge.r2_precision)
        notes.append(f"R2 mean {knowledge.r2_mean:g} and precision {knowledge.r2_precision:g} "
                     f"give Beta({a1:g}, {a2:g})")
    else:
        a1, a2 = None, DEFAULT_A2
        notes.append(f"a2 = {DEFAULT_A2:g} as the heavy-tailed default")

    a_G = 1.0
    c = [0.5] * G
    if knowledge.signal is not None:
        tags = _signal_tags(knowledge.signal, G)
        if all(t == "concentrated" for t in tags):
            a_G = CONCENTRATED_AG
            notes.append(f"concentrated signals: small a_G = {a_G:g} for strong shrinkage")
        elif all(t == "distributed" for t in tags):
            a_G = DISTRIBUTED_AG
            notes.append(f"distributed signals: larger a_G = {a_G:g} for less shrinkage")
        else:
            a_G = 0.5
            notes.append("mixed signal types: intermediate a_G = 0.5")
        c = [0.5 if t == "concentrated" else 1.0 for t in tags]
        notes.append("within-group c_g = 0.5 where concentrated, 1 where distributed")

    if knowledge.couple == "cg_from_ag":
        if knowledge.c_g is not None:
            raise DomainError("c_g cannot be both given and derived from a_G")
        c = [couple_cg_from_ag(a_G, pg) for pg in structure.group_sizes]
        notes.append("coupling c_g = a_G / p_g")
    elif knowledge.couple == "ag_from_cg":
        if knowledge.c_g is None:
            raise DomainError("coupling a_G from c_g needs c_g")
        c = [float(x) for x in (knowledge.c_g if hasattr(knowledge.c_g, "__len__")
                                else [knowledge.c_g] * G)]
        if knowledge.signal is not None:
            raise DomainError("signal tags and an explicit c_g coupling conflict")
        a_G = couple_ag_from_cg(structure, c)
        notes.append(f"coupling a_G = {a_G:g} from the within-group concentrations")
    elif knowledge.couple is not None:
        raise DomainError(f"unknown coupling direction {knowledge.couple!r}")
    elif knowledge.c_g is not None:
        c = [float(x) for x in (knowledge.c_g if hasattr(knowledge.c_g, "__len__")
                                else [knowledge.c_g] * G)]

    if a1 is None:
        a1 = G * a_G
        notes.append(f"a1 = G * a_G = {a1:g}")
    return Hyperparams(a1, a2, a_G, tuple(c)), "; ".join(notes)
