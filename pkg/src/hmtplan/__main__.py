import sys

from hmtplan.cli import main

sys.exit(main())
