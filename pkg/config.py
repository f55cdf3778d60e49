# Configuraciones de base de datos
DB_PATH = "reports/results.db"

# Directorios de salida por defecto
REPORTS_DIR = "reports"
DATA_DIR = "data"

# Semilla por defecto de todas las ejecuciones
DEFAULT_SEED = 0

# Configuraciones de la señal (ventanas de 500 s, segmentos de 5 s, paso de 5 s)
WINDOW_SECONDS = 500.0
SEGMENT_SECONDS = 5.0
STRIDE_SECONDS = 5.0
TARGET_SAMPLE_RATE_HZ = 512.0

# Configuraciones del objetivo contrastivo
TEMPERATURE = 0.1
N_NEGATIVES = 30
LOOKAHEAD_SECONDS = 120.0

# Configuraciones de la evaluación episódica
MERGE_GAP_SECONDS = 300.0
MIN_EVENT_SECONDS = 20.0
MIN_EVENT_POSITIVES = 5
ONLINE_WINDOW_SECONDS = 10
ONLINE_MIN_POSITIVES = 3
KAPPA_SEGMENTS = 300
KAPPA_ITERATIONS = 250

# Configuraciones de LoRA
LORA_RANK = 8
LORA_ALPHA = 16.0

# Formato de los números en los informes CSV
CSV_FLOAT_FORMAT = "%.10g"
