from evtlight.cli import main

raise SystemExit(main())
