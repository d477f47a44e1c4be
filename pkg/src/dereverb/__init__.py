"""Speech dereverberation in the log-Mel domain.

Submodules:

- ``tensor``: float64 tape-based reverse-mode autodiff with the layers the models need
- ``dsp``: STFT, Mel filterbank, normalisation, Griffin-Lim and WAV IO
- ``roomsim``: image-method room impulse responses and corpus building
- ``model``: pre-sequence networks, BERT/BLSTM encoders and the decoder
- ``train``: Adam with warmup and linear decay, batching and checkpointed loops
- ``wpe``: weighted prediction error baseline
- ``evaluate``: metrics, enhancement driver, attention diagnostics, timing
- ``cli``: the ``dereverb`` command
"""

__version__ = "0.1.0"
