import sys

from dekrr.cli import main

sys.exit(main())
