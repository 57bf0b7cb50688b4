# first line: 151
def _load_splits(cfg: DataConfig,
                 signature: Tuple[Optional[str], ...] = ()) -> Tuple[Dataset, Dataset]:
    # signature only keys the cache entry
    if cfg.source == "idx":
        from vitkd.module.data.idx_loader import idx_load

        train = idx_load(cfg.train_images, cfg.train_labels, cfg.image_size, "train", cfg.classes)
        test = idx_load(cfg.test_images, cfg.test_labels, cfg.image_size, "test", cfg.classes)
    else:
        train = synth_generate(cfg.train_seed, cfg.train_per_class, cfg.classes,
                               cfg.image_size, cfg.noise, "train")
        test = synth_generate(cfg.test_seed, cfg.test_per_class, cfg.classes,
                              cfg.image_size, cfg.noise, "test")
    logging.info("Loaded %d train and %d test samples (%s)", len(train), len(test), cfg.source)
    return train, test
