from mmcompress.pipeline.cli import main

main()
