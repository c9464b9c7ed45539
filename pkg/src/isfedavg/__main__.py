import sys

from isfedavg.cli import main

sys.exit(main())
