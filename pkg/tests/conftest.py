import sys
from pathlib import Path

# Make the reference helpers importable without packaging them.
sys.path.insert(0, str(Path(__file__).parent))
