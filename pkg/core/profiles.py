from pathlib import Path

from pydantic import ValidationError

from core.data_model import ModelConfig
from core.errors import InvalidInputError, ParseError

# Perfiles de modelo. "toy" usa los valores por defecto de ModelConfig.
PROFILES = {
    "toy": {},
    "small": {
        "n_layers": 12, "n_heads": 12, "n_gqa": 4, "n_embed": 768, "n_inner": 1728, "dropout": 0.1,
        "local_window": 10, "segment_samples": 2560, "max_time": 100, "max_channels": 128, "lora_layers": 4,
    },
    "medium": {
        "n_layers": 24, "n_heads": 16, "n_gqa": 8, "n_embed": 2048, "n_inner": 5362, "dropout": 0.1,
        "local_window": 10, "segment_samples": 2560, "max_time": 100, "max_channels": 128,
    },
}

# Perfiles que solo se usan para el recuento de parámetros; nunca se instancian
CENSUS_ONLY = {"medium"}

_NONE = {"none", "null", ""}


def profile_values(name):
    if name not in PROFILES:
        raise InvalidInputError(f"perfil desconocido: {name} (disponibles: {', '.join(sorted(PROFILES))})")
    return dict(PROFILES[name])


def _parse_value(key, raw):
    value = raw.strip()
    if value.lower() in _NONE:
        return None
    if key == "components":
        return tuple(part.strip() for part in value.split(",") if part.strip())
    return value


def parse_profile_file(path):
    """
    Lee un archivo de perfil `clave=valor` (se admiten comentarios con `#` y líneas vacías).

    Parámetros:
    - path (str | Path): Ruta del archivo.

    Retorna:
    - dict[str, str | tuple | None]: Valores sin convertir; la validación de tipos la hace `ModelConfig`.
    """
    values = {}
    for number, line in enumerate(Path(path).read_text().splitlines(), start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        if "=" not in content:
            raise ParseError(f"se esperaba 'clave=valor', se encontró {line!r}", number)
        key, raw = content.split("=", 1)
        key = key.strip()
        if key not in ModelConfig.model_fields:
            raise ParseError(f"clave desconocida {key!r}", number)
        values[key] = _parse_value(key, raw)
    return values


def resolve_model_config(profile="toy", config_file=None, overrides=None):
    """
    Resuelve la configuración del modelo con precedencia: opciones > archivo de perfil > perfil con nombre.

    Parámetros:
    - profile (str): Perfil de partida ("toy", "small" o "medium").
    - config_file (str | None): Archivo `clave=valor` opcional.
    - overrides (dict | None): Valores explícitos (opciones de la línea de comandos); se ignoran los None.

    Retorna:
    - ModelConfig: Configuración validada.
    """
    values = profile_values(profile)
    if config_file is not None:
        values.update(parse_profile_file(config_file))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return ModelConfig.model_validate(values)
    except ValidationError as e:
        raise InvalidInputError(f"configuración de modelo inválida: {e}") from e


def check_instantiable(profile):
    if profile in CENSUS_ONLY:
        raise InvalidInputError(f"el perfil {profile} solo sirve para el recuento de parámetros")
