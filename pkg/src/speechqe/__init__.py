"""Quality estimation for speech translation: corpora, cascaded and
end-to-end scoring systems, training strategies, and evaluation."""

__version__ = "0.1.0"
