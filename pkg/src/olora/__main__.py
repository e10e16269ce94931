import sys

from olora.cli import main

sys.exit(main())
