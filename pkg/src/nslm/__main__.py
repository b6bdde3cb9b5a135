from nslm.cli import main

raise SystemExit(main())
