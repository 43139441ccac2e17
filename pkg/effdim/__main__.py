import sys

from effdim.main import main

sys.exit(main())
