import logging
import os

_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def get_logger(name):
    """
    Devuelve un logger configurado con un único manejador de consola.

    El nivel se toma de la variable de entorno `MVPF_LOG_LEVEL` (por defecto INFO).

    Parámetros:
    - name (str): Nombre del logger, normalmente `__name__` del módulo.

    Retorna:
    - logging.Logger: El logger listo para usar.
    """
    logger = logging.getLogger(name)
    if not logger.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(_FORMAT))
        logger.addHandler(handler)
        logger.propagate = False
    logger.setLevel(os.environ.get("MVPF_LOG_LEVEL", "INFO").upper())
    return logger
