import sys

from dnq.cli import main

sys.exit(main())
