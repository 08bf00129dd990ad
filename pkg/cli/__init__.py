# julia-tc command-line interface
