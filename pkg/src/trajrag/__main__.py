import sys

from trajrag.cli import main

sys.exit(main())
