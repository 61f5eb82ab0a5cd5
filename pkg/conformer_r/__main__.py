import sys

from conformer_r.main import main

sys.exit(main())
