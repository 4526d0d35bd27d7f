import sys

from sfdet.cli import main

sys.exit(main())
