import sys

from fklvi.cli import main

sys.exit(main())
