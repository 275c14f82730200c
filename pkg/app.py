# app.py
import sys
from pathlib import Path

# Aggiungi la directory root del progetto al PYTHONPATH
project_root = Path(__file__).parent
sys.path.append(str(project_root))

from components.cli import main

if __name__ == "__main__":
    sys.exit(main())
