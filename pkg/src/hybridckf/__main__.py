import sys

from hybridckf.cli import main

sys.exit(main())
