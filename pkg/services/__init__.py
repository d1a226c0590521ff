from .csv_service import CsvService
from .master_service import MasterService
