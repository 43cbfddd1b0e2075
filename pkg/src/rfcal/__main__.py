import sys

from rfcal.cli import main

sys.exit(main())
