import sys

from adaptid.cli import main

sys.exit(main())
