import json
import os

import numpy as np
import torch

from core.data_model import LoraConfig, ModelConfig
from core.errors import CheckpointError
from core.logger import get_logger
from core.model import MVPFormer, apply_lora

logger = get_logger(__name__)

MANIFEST_NAME = "checkpoint.manifest"
BLOB_NAME = "checkpoint.bin"
_HEADER = "# mvpformer-checkpoint v1"
_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8")}


def _dtype_name(tensor):
    name = str(tensor.dtype).replace("torch.", "")
    if name not in _DTYPES:
        raise CheckpointError(f"tipo de tensor no soportado en checkpoints: {name}")
    return name


def save_checkpoint(directory, model, extra_tensors=None, lora_config=None):
    """
    Guarda un modelo como manifiesto de texto + un único blob little-endian.

    El manifiesto contiene la configuración del modelo, la de LoRA (si hay adaptadores) y una línea por tensor:
    `tensor <nombre> <dtype> <forma> <offset> <nbytes>`.

    Parámetros:
    - directory (str): Directorio de destino (se crea si no existe).
    - model (MVPFormer): Modelo a guardar.
    - extra_tensors (dict[str, torch.Tensor] | None): Tensores adicionales (por ejemplo, la cabeza de clasificación).
    - lora_config (LoraConfig | None): Configuración de los adaptadores insertados en el modelo.

    Retorna:
    - str: Ruta del manifiesto escrito.
    """
    os.makedirs(directory, exist_ok=True)
    tensors = dict(model.state_dict())
    for name, tensor in (extra_tensors or {}).items():
        tensors[f"extra.{name}"] = tensor

    lines = [_HEADER, f"config {model.config.model_dump_json()}"]
    if lora_config is not None:
        lines.append(f"lora {lora_config.model_dump_json()}")
    offset = 0
    with open(os.path.join(directory, BLOB_NAME), "wb") as blob:
        for name in sorted(tensors):
            tensor = tensors[name].detach().cpu()
            dtype = _dtype_name(tensor)
            payload = tensor.numpy().astype(_DTYPES[dtype], copy=False).tobytes(order="C")
            blob.write(payload)
            shape = ",".join(str(s) for s in tensor.shape) or "-"
            lines.append(f"tensor {name} {dtype} {shape} {offset} {len(payload)}")
            offset += len(payload)

    manifest_path = os.path.join(directory, MANIFEST_NAME)
    with open(manifest_path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    logger.info(f"Checkpoint guardado en {directory}: {len(tensors)} tensores, {offset} bytes")
    return manifest_path


def _read_manifest(directory):
    manifest_path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.exists(manifest_path):
        raise CheckpointError(f"no existe el checkpoint {manifest_path}")
    with open(manifest_path, encoding="utf-8") as f:
        lines = [line.rstrip("\n") for line in f if line.strip()]
    if not lines or lines[0] != _HEADER:
        raise CheckpointError(f"{manifest_path} no es un manifiesto de checkpoint")

    config, lora_config, entries = None, None, []
    for line in lines[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "config":
            config = ModelConfig.model_validate_json(rest)
        elif kind == "lora":
            lora_config = LoraConfig.model_validate_json(rest)
        elif kind == "tensor":
            name, dtype, shape, offset, nbytes = rest.split(" ")
            dims = () if shape == "-" else tuple(int(s) for s in shape.split(","))
            entries.append((name, dtype, dims, int(offset), int(nbytes)))
        else:
            raise CheckpointError(f"línea de manifiesto desconocida: {line}")
    if config is None:
        raise CheckpointError(f"{manifest_path} no contiene la configuración del modelo")
    return config, lora_config, entries


def load_checkpoint(directory):
    """
    Reconstruye un modelo guardado con `save_checkpoint`.

    Parámetros:
    - directory (str): Directorio del checkpoint.

    Retorna:
    - tuple[MVPFormer, dict[str, torch.Tensor], LoraConfig | None]: El modelo (con adaptadores si los tenía),
      los tensores adicionales y la configuración de LoRA.
    """
    config, lora_config, entries = _read_manifest(directory)
    blob_path = os.path.join(directory, BLOB_NAME)
    if not os.path.exists(blob_path):
        raise CheckpointError(f"falta el blob de tensores {blob_path}")
    with open(blob_path, "rb") as f:
        blob = f.read()

    tensors = {}
    for name, dtype, dims, offset, nbytes in entries:
        if dtype not in _DTYPES:
            raise CheckpointError(f"tipo de tensor desconocido para {name}: {dtype}")
        if offset + nbytes > len(blob):
            raise CheckpointError(f"el blob está truncado: {name} necesita hasta el byte {offset + nbytes}")
        array = np.frombuffer(blob, dtype=_DTYPES[dtype], count=nbytes // _DTYPES[dtype].itemsize, offset=offset)
        tensors[name] = torch.from_numpy(array.astype(_DTYPES[dtype].newbyteorder("="), copy=True).reshape(dims))

    model = MVPFormer(config)
    if lora_config is not None:
        apply_lora(model, lora_config, freeze_base=True)
    model_tensors = {k: v for k, v in tensors.items() if not k.startswith("extra.")}
    dtypes = {v.dtype for v in model_tensors.values()}
    if len(dtypes) == 1:
        model.to(dtypes.pop())
    try:
        model.load_state_dict(model_tensors, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"el checkpoint no coincide con su configuración: {e}") from e
    extras = {k[len("extra."):]: v for k, v in tensors.items() if k.startswith("extra.")}
    logger.info(f"Checkpoint cargado desde {directory}: {len(tensors)} tensores")
    return model, extras, lora_config
