import sqlite3
from pathlib import Path

import pandas as pd

from core.logger import get_logger

logger = get_logger(__name__)


class DBManager:
    """
    Registro de ejecuciones de la CLI en una base de datos SQLite.
    Guarda cada ejecución, el resultado de cada comprobación y un resumen por ejecución.

    Los errores de escritura se registran en el log y no interrumpen la ejecución.
    """

    def __init__(self, db_file):
        """
        Parámetros:
        - db_file (str): Ruta al archivo SQLite; el directorio se crea si no existe.
        """
        self.db_file = db_file

    def _connect(self):
        Path(self.db_file).parent.mkdir(parents=True, exist_ok=True)
        return sqlite3.connect(self.db_file)

    def create_tables(self):
        """
        Crea las tablas si no existen:
        - run_executions: Una fila por ejecución de la CLI.
        - check_results: Resultado de cada comprobación (o métrica) de una ejecución.
        - run_summary: Recuentos y código de salida de cada ejecución.
        """
        try:
            with self._connect() as conn:
                c = conn.cursor()

                c.execute('''CREATE TABLE IF NOT EXISTS run_executions (
                            ExecutionId INTEGER PRIMARY KEY AUTOINCREMENT,
                            Command TEXT NOT NULL,
                            Seed INT,
                            OutDir TEXT,
                            ExecutionDate TIMESTAMP DEFAULT CURRENT_TIMESTAMP
                        )''')

                c.execute('''CREATE TABLE IF NOT EXISTS check_results (
                            id INTEGER PRIMARY KEY AUTOINCREMENT,
                            ExecutionId INTEGER,  -- Clave foránea que referencia 'run_executions'
                            CheckName TEXT,
                            Status TEXT,
                            Error TEXT,
                            Detail TEXT,
                            Duration REAL,
                            Date TIMESTAMP DEFAULT CURRENT_TIMESTAMP,
                            FOREIGN KEY (ExecutionId) REFERENCES run_executions(ExecutionId)
                        )''')

                c.execute('''CREATE TABLE IF NOT EXISTS run_summary (
                            ExecutionId INTEGER PRIMARY KEY,
                            TotalChecks INT,
                            PassedChecks INT,
                            FailedChecks INT,
                            TotalDuration REAL,
                            ExitCode INT,
                            FOREIGN KEY (ExecutionId) REFERENCES run_executions(ExecutionId)
                        )''')

        except Exception as e:
            logger.error(f"Error al crear las tablas: {e}")

    def insert_run_execution(self, command, seed=None, out_dir=None):
        """
        Retorna:
        - int | None: El ID de la ejecución insertada, o None en caso de error.
        """
        try:
            with self._connect() as conn:
                c = conn.cursor()
                c.execute('''INSERT INTO run_executions (Command, Seed, OutDir) VALUES (?, ?, ?)''',
                          (command, seed, out_dir))
                return c.lastrowid
        except Exception as e:
            logger.error(f"Error al insertar la ejecución: {e}")
            return None

    def insert_check_result(self, execution_id, check_result):
        """
        Inserta un resultado en 'check_results'.

        Parámetros:
        - execution_id (int): ID de la ejecución.
        - check_result (CheckResult): Resultado de una comprobación.
        """
        try:
            with self._connect() as conn:
                c = conn.cursor()
                c.execute('''INSERT INTO check_results (ExecutionId, CheckName, Status, Error, Detail, Duration)
                            VALUES (?, ?, ?, ?, ?, ?)''',
                          (execution_id, check_result.name, check_result.status, check_result.error,
                           check_result.detail, check_result.duration))
        except Exception as e:
            logger.error(f"Error al insertar el resultado de la comprobación: {e}")

    def insert_run_summary(self, execution_id, summary):
        """
        Inserta el resumen de una ejecución en 'run_summary'.

        Parámetros:
        - summary (dict): Claves 'TotalChecks', 'PassedChecks', 'FailedChecks', 'TotalDuration', 'ExitCode'.
        """
        try:
            with self._connect() as conn:
                c = conn.cursor()
                c.execute('''INSERT INTO run_summary
                            (ExecutionId, TotalChecks, PassedChecks, FailedChecks, TotalDuration, ExitCode)
                            VALUES (?, ?, ?, ?, ?, ?)''',
                          (execution_id, summary['TotalChecks'], summary['PassedChecks'], summary['FailedChecks'],
                           summary['TotalDuration'], summary['ExitCode']))
        except Exception as e:
            logger.error(f"Error al insertar el resumen de la ejecución: {e}")

    def fetch_check_results(self, execution_id=None):
        """
        Lee los resultados de las comprobaciones, opcionalmente filtrados por ejecución.

        Retorna:
        - pandas.DataFrame: Vacío si ocurre un error.
        """
        try:
            with self._connect() as conn:
                query = "SELECT * FROM check_results"
                params = ()
                if execution_id is not None:
                    query += " WHERE ExecutionId = ?"
                    params = (execution_id,)
                return pd.read_sql(query, conn, params=params)
        except Exception as e:
            logger.error(f"Error al obtener los resultados: {e}")
            return pd.DataFrame()
