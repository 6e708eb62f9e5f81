"""
Semillas derivadas

Todas las corrientes aleatorias salen de numpy.random.default_rng([seed, *claves])
(réplica, individuo, iteración EM, paso de tiempo), de modo que cada tarea
paralela tiene su propio generador y el resultado no depende del reparto.

Autor: Sistema
Fecha: 2026-10-17
"""

import numpy as np


def derive_seed(seed: int, *keys: int) -> int:
    """Semilla entera de 63 bits para la corriente (seed, *keys)"""
    state = np.random.SeedSequence([int(seed), *(int(k) for k in keys)]).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *(int(k) for k in keys)])
