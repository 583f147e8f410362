import sys
from pathlib import Path

# test helpers (oracles, synthetic data) live next to the tests
sys.path.insert(0, str(Path(__file__).parent))
