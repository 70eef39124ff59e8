import sys

from egfrlmm.cli import main

sys.exit(main())
