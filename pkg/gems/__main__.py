import sys

from gems.cli import main

sys.exit(main())
