import sys

from gr2r.cli import main

sys.exit(main())
