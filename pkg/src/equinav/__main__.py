import sys

from equinav.cli import main

sys.exit(main())
