namespace bf {}
