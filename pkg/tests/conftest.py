import sys
from pathlib import Path

import negpol

sys.path.insert(0, str(Path(__file__).parent))

DATA = Path(negpol.__file__).parent / "data"
