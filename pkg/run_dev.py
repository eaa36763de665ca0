from saandet.bin.run import main

if __name__ == "__main__":
    main()
