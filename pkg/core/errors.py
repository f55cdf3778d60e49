class MVPError(Exception):
    """
    Excepción base de todos los errores del proyecto.
    """


class InvalidInputError(MVPError, ValueError):
    """
    Entrada rechazada: dimensiones incompatibles, parámetros fuera de rango o configuraciones inválidas.
    """


class ParseError(MVPError):
    """
    Error al interpretar un archivo de texto (CSV, etiquetas, manifiesto o perfil).

    Atributos:
    - line_number (int): Número de línea (empezando en 1) donde se detectó el problema.
    """

    def __init__(self, message, line_number):
        super().__init__(f"línea {line_number}: {message}")
        self.line_number = line_number


class DataUnderflowError(MVPError):
    """
    No hay suficientes datos para la operación pedida; el mensaje indica el mínimo necesario.
    """

    def __init__(self, message, required):
        super().__init__(f"{message} (mínimo requerido: {required})")
        self.required = required


class CheckpointError(MVPError):
    """
    Checkpoint inexistente, incompleto o inconsistente con la configuración del modelo.
    """
