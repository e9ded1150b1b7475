from g2s.app import main


raise SystemExit(main())
