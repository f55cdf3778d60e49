import json
from pathlib import Path

import pandas as pd
from openpyxl import Workbook, load_workbook
from openpyxl.styles import Alignment, Border, Font, PatternFill, Side

import config
from core.data_model import RunConfig
from core.errors import InvalidInputError
from core.logger import get_logger

logger = get_logger(__name__)

MANIFEST_FILE = "manifest.json"
CHECK_HEADERS = ["CheckName", "Status", "Error", "Detail", "Duration"]


def write_csv(df, path):
    """
    Escribe un informe CSV con formato numérico fijo para que dos ejecuciones iguales produzcan archivos idénticos.

    Retorna:
    - Path: La ruta escrita.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format=config.CSV_FLOAT_FORMAT, lineterminator="\n")
    logger.info(f"Informe escrito en {path}")
    return path


def checks_frame(results):
    """
    Tabla de resultados de la verificación; la duración es la única columna dependiente del reloj.
    """
    return pd.DataFrame([{"CheckName": r.name, "Status": r.status, "Error": r.error or "", "Detail": r.detail,
                          "Duration": r.duration} for r in results], columns=CHECK_HEADERS)


def write_manifest(run_config, directory):
    """
    Escribe la configuración completamente resuelta de la ejecución como `manifest.json`.
    """
    path = Path(directory) / MANIFEST_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(run_config.model_dump_json(indent=2) + "\n")
    return path


def read_manifest(path):
    """
    Lee un manifiesto; acepta el archivo o el directorio que lo contiene.

    Retorna:
    - RunConfig: La configuración registrada.
    """
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_FILE
    if not path.exists():
        raise InvalidInputError(f"no existe el manifiesto {path}")
    try:
        return RunConfig.model_validate(json.loads(path.read_text()))
    except (ValueError, TypeError) as e:
        raise InvalidInputError(f"manifiesto inválido {path}: {e}") from e


def write_gnuplot(csv_path, x_column, y_columns, title=None, logscale=False):
    """
    Escribe un script de gnuplot junto al CSV (misma ruta con extensión `.gp`) que dibuja `y_columns` frente a
    `x_column`. No se genera ninguna imagen.
    """
    csv_path = Path(csv_path)
    header = pd.read_csv(csv_path, nrows=0).columns.tolist()
    missing = [c for c in [x_column] + list(y_columns) if c not in header]
    if missing:
        raise InvalidInputError(f"columnas inexistentes en {csv_path.name}: {missing}")

    x_index = header.index(x_column) + 1
    plots = [f'"{csv_path.name}" using {x_index}:{header.index(y) + 1} with linespoints title "{y}"'
             for y in y_columns]
    lines = [
        "set datafile separator ','",
        "set key autotitle columnhead",
        f'set title "{title or csv_path.stem}"',
        f'set xlabel "{x_column}"',
    ]
    if logscale:
        lines.append("set logscale y")
    lines.append("plot " + ", \\\n     ".join(plots))
    script = csv_path.with_suffix(".gp")
    script.write_text("\n".join(lines) + "\n")
    return script


def _format_error_message(error_message):
    if error_message:
        return error_message.replace("; ", "\n")
    return error_message


def _get_status_format(status, error_message):
    """
    Devuelve (estado, color, mensaje de error) según el estado de la comprobación.
    """
    if status == "PASSED":
        return ("PASSED", "00FF00", None)
    return ("FAILED", "FF0000", _format_error_message(error_message))


class ExcelWriter:
    """
    Escribe los resultados de la verificación en un libro Excel con `openpyxl`: una hoja por ejecución, con la
    celda de estado coloreada (verde PASSED, rojo FAILED).
    """

    def __init__(self, file_path):
        self.file_path = file_path
        self.thin_border = Border(
            left=Side(style="thin"),
            right=Side(style="thin"),
            top=Side(style="thin"),
            bottom=Side(style="thin")
        )

    def _apply_format_to_row(self, row, status, color, error_message):
        status_cell = row[1]
        error_cell = row[2]

        status_cell.value = status
        status_cell.fill = PatternFill(start_color=color, fill_type="solid")
        status_cell.font = Font(color="000000")

        error_cell.value = error_message
        error_cell.alignment = Alignment(wrap_text=True)

        for cell in row:
            cell.border = self.thin_border

    def write_results(self, results, execution_name):
        """
        Añade una hoja `execution_name` con una fila por comprobación. Crea el libro si no existe.

        Los errores se registran en el log y no se propagan.
        """
        try:
            if not results:
                logger.warning("No hay resultados que escribir en Excel.")
                return
            path = Path(self.file_path)
            path.parent.mkdir(parents=True, exist_ok=True)
            if path.exists():
                wb = load_workbook(path)
            else:
                wb = Workbook()
                wb.remove(wb.active)

            title = execution_name[:31]
            if title in wb.sheetnames:
                del wb[title]
            ws = wb.create_sheet(title)
            ws.append(CHECK_HEADERS)
            for cell in ws[1]:
                cell.font = Font(bold=True)
            for result in results:
                ws.append([result.name, result.status, result.error, result.detail, round(result.duration, 3)])
                status, color, error_message = _get_status_format(result.status, result.error)
                self._apply_format_to_row(ws[ws.max_row], status, color, error_message)

            wb.save(path)
            logger.info(f"Resultados escritos en la hoja '{title}' de {path}.")
        except Exception as e:
            logger.error(f"Error escribiendo el archivo Excel: {e}")
