import sys

from cscct.cli import main

sys.exit(main())
