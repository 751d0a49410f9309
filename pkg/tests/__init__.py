import os
import sys

# modules live flat in src/
SRC_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), '..', 'src')
if SRC_DIR not in sys.path:
    sys.path.insert(0, SRC_DIR)
