from channelkan.numerics.autograd import GradTape, Tensor, backward
from channelkan.numerics.fft import dft, idft, irfft, rfft

__all__ = ["GradTape", "Tensor", "backward", "dft", "idft", "irfft", "rfft"]
