import zlib

import numpy as np

# Todos los números aleatorios del proyecto salen de Philox (generador de 64 bits basado en
# contador), que produce la misma secuencia en cualquier plataforma para una misma clave.


def _stream_key(name):
    # crc32 es estable entre ejecuciones, a diferencia de hash()
    return zlib.crc32(name.encode("utf-8"))


def philox(seed, *stream):
    """
    Crea un generador Philox determinista para una semilla y un sub-flujo con nombre.

    Parámetros:
    - seed (int): Semilla maestra.
    - stream (str | int): Identificadores del sub-flujo (por ejemplo "dropout", capa, paso).

    Retorna:
    - numpy.random.Generator: Generador independiente para ese sub-flujo.
    """
    entropy = [int(seed)] + [_stream_key(s) if isinstance(s, str) else int(s) for s in stream]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(seed, *stream):
    """
    Deriva una semilla entera nueva a partir de la semilla maestra y un sub-flujo.
    """
    return int(philox(seed, *stream).integers(0, 2**31 - 1))
